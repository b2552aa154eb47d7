"""Experiment engine: trials, EER, early stopping, CV, and scenarios.

A PairedDataset holds the assembled concatenated inputs of both modalities.
Verification trials pair one face input with one voice input and are labeled
same/different by speaker id. Scores are cosine similarities of the two
projected vectors; EER is computed by a threshold sweep with linear
interpolation between the bracketing operating points.

Scenario recipes mirror the challenge's heard/unheard model selection:
heard scenarios evaluate the pretrained model (all-data for English,
English-excluded for German), unheard scenarios use language-excluded
corpora with fine-tuning, and every manifest consumed by an unheard run is
audited for excluded-language leakage (hard failure on any hit).
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from .aamloss import AamConfig, JointParams, init_classifier, joint_step
from .diffcore import AdamState, adam_step, make_rng
from .embedstore import FoldPlan, split_folds
from .errors import (
    ConfigError,
    LookupError_,
    MetricError,
    ProtocolViolationError,
    SamplingError,
    SchemaError,
)
from .fusion import (
    MappingHead,
    XAttnModel,
    head_forward,
    head_from_arrays,
    head_to_arrays,
    score_batch,
    xattn_backward,
    xattn_forward,
    xattn_loss,
)


@dataclass
class Trial:
    face_id: str
    voice_id: str
    label: bool  # True = same speaker


@dataclass
class EvalReport:
    eer: float
    threshold_at_eer: float
    n_target: int
    n_nontarget: int

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 32
    max_steps: int = 500
    patience: int = 5
    eval_every: int = 25
    seed: int = 0
    aam: AamConfig = field(default_factory=AamConfig)
    p_drop: float = 0.9
    out_dim: int = 192
    classifier_reinit: bool = True
    n_dev_target: int = 1000
    n_dev_nontarget: int = 1000

    def validate(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        self.aam.validate()


class PairedDataset:
    """Assembled face and voice inputs with id/speaker lookups."""

    def __init__(self, face_inputs, voice_inputs):
        self.face_inputs = list(face_inputs)
        self.voice_inputs = list(voice_inputs)
        self.face_by_id = {c.owner_id: c for c in self.face_inputs}
        self.voice_by_id = {c.owner_id: c for c in self.voice_inputs}
        self.face_dim = len(self.face_inputs[0].vector) if self.face_inputs else 0
        self.voice_dim = len(self.voice_inputs[0].vector) if self.voice_inputs else 0

    def speakers(self):
        face = {c.speaker_id for c in self.face_inputs}
        voice = {c.speaker_id for c in self.voice_inputs}
        return sorted(face & voice)

    def subset(self, speakers=None, voice_language=None):
        spk = set(speakers) if speakers is not None else None
        faces = [
            c for c in self.face_inputs if spk is None or c.speaker_id in spk
        ]
        voices = [
            c
            for c in self.voice_inputs
            if (spk is None or c.speaker_id in spk)
            and (voice_language is None or c.language == voice_language)
        ]
        return PairedDataset(faces, voices)

    def matrices(self, speaker_index):
        """(X_face, y_face, X_voice, y_voice) restricted to mapped speakers."""
        faces = [c for c in self.face_inputs if c.speaker_id in speaker_index]
        voices = [c for c in self.voice_inputs if c.speaker_id in speaker_index]
        xf = np.stack([c.vector for c in faces])
        yf = np.array([speaker_index[c.speaker_id] for c in faces])
        xv = np.stack([c.vector for c in voices])
        yv = np.array([speaker_index[c.speaker_id] for c in voices])
        return xf, yf, xv, yv


def shuffle_speaker_labels(dataset, rng):
    """Permute speaker ids across inputs of each modality (chance baseline)."""
    import copy

    out_faces = [copy.copy(c) for c in dataset.face_inputs]
    out_voices = [copy.copy(c) for c in dataset.voice_inputs]
    for inputs in (out_faces, out_voices):
        labels = [c.speaker_id for c in inputs]
        perm = rng.permutation(len(labels))
        for c, j in zip(inputs, perm):
            c.speaker_id = labels[j]
    return PairedDataset(out_faces, out_voices)


# ---------------------------------------------------------------------------
# Trials


def generate_trials(dataset, held_out_speakers, n_target, n_nontarget, rng):
    """Sample same-speaker and cross-speaker (face, voice) trials.

    Sampling is without replacement over the full pair pool; asking for more
    trials than the pool contains is an error. No speaker outside
    `held_out_speakers` ever appears.
    """
    held = set(held_out_speakers)
    faces = [c for c in dataset.face_inputs if c.speaker_id in held]
    voices = [c for c in dataset.voice_inputs if c.speaker_id in held]
    spk_with_face = {c.speaker_id for c in faces}
    spk_with_voice = {c.speaker_id for c in voices}
    for s in held:
        if s not in spk_with_face or s not in spk_with_voice:
            raise SamplingError(f"held-out speaker {s} lacks a modality")

    same_pool = [
        (f.owner_id, v.owner_id)
        for f in faces
        for v in voices
        if f.speaker_id == v.speaker_id
    ]
    cross_pool = [
        (f.owner_id, v.owner_id)
        for f in faces
        for v in voices
        if f.speaker_id != v.speaker_id
    ]
    if n_target > len(same_pool):
        raise SamplingError(
            f"requested {n_target} target trials, only {len(same_pool)} possible"
        )
    if n_nontarget > len(cross_pool):
        raise SamplingError(
            f"requested {n_nontarget} non-target trials, "
            f"only {len(cross_pool)} possible"
        )
    same_idx = rng.choice(len(same_pool), size=n_target, replace=False)
    cross_idx = rng.choice(len(cross_pool), size=n_nontarget, replace=False)
    trials = [Trial(*same_pool[i], True) for i in sorted(same_idx)]
    trials += [Trial(*cross_pool[i], False) for i in sorted(cross_idx)]
    return trials


def default_dev_trials(dataset, held_out_speakers, cfg, rng):
    """Dev trials capped at the available pair pool."""
    held = set(held_out_speakers)
    faces = {}
    voices = {}
    for c in dataset.face_inputs:
        if c.speaker_id in held:
            faces[c.speaker_id] = faces.get(c.speaker_id, 0) + 1
    for c in dataset.voice_inputs:
        if c.speaker_id in held:
            voices[c.speaker_id] = voices.get(c.speaker_id, 0) + 1
    n_same = sum(faces.get(s, 0) * voices.get(s, 0) for s in held)
    total = sum(faces.values()) * sum(voices.values())
    n_cross = total - n_same
    return generate_trials(
        dataset,
        held_out_speakers,
        min(cfg.n_dev_target, n_same),
        min(cfg.n_dev_nontarget, n_cross),
        rng,
    )


# ---------------------------------------------------------------------------
# EER


def _operating_points(tar, non):
    """FAR/FRR at every distinct threshold (accept means score >= t)."""
    tar = np.sort(np.asarray(tar, dtype=np.float64))
    non = np.sort(np.asarray(non, dtype=np.float64))
    thresholds = np.unique(np.concatenate([tar, non]))
    thresholds = np.concatenate([thresholds, [np.inf]])
    far = 1.0 - np.searchsorted(non, thresholds, side="left") / len(non)
    frr = np.searchsorted(tar, thresholds, side="left") / len(tar)
    return thresholds, far, frr


def compute_eer(scores, labels):
    """EER of a scored trial set, interpolated at the FAR/FRR crossing.

    Ties in the crossing are broken toward the lower threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    tar = scores[labels]
    non = scores[~labels]
    if len(tar) == 0 or len(non) == 0:
        raise MetricError(
            f"EER needs both classes: {len(tar)} target, {len(non)} non-target"
        )
    thresholds, far, frr = _operating_points(tar, non)
    diff = frr - far
    k = int(np.argmax(diff >= 0.0))
    if diff[k] == 0.0:
        eer = far[k]
        thr = thresholds[k]
    else:
        a, b = diff[k - 1], diff[k]
        lam = -a / (b - a)
        eer = far[k - 1] + lam * (far[k] - far[k - 1])
        t0, t1 = thresholds[k - 1], thresholds[k]
        if np.isinf(t1):
            thr = t0
        else:
            thr = t0 + lam * (t1 - t0)
    return EvalReport(
        eer=float(eer),
        threshold_at_eer=float(thr),
        n_target=int(len(tar)),
        n_nontarget=int(len(non)),
    )


def score_trials(head_face, head_voice, trials, dataset):
    """Cosine scores of trials in eval mode (no dropout), trial order kept."""
    try:
        xf = np.stack([dataset.face_by_id[t.face_id].vector for t in trials])
        xv = np.stack([dataset.voice_by_id[t.voice_id].vector for t in trials])
    except KeyError as exc:
        raise LookupError_(f"unknown trial record id {exc.args[0]}") from exc
    yf, _ = head_forward(head_face, xf, train=False)
    yv, _ = head_forward(head_voice, xv, train=False)
    return score_batch(yf, yv)


# ---------------------------------------------------------------------------
# Training


def _init_params(dataset, cfg, init_arrays=None, n_speakers=None):
    rng = make_rng(cfg.seed ^ 0x5EED)
    if init_arrays is not None:
        head_f = head_from_arrays(
            init_arrays, "head_face", cfg.p_drop, expect_in_dim=dataset.face_dim
        )
        head_v = head_from_arrays(
            init_arrays, "head_voice", cfg.p_drop, expect_in_dim=dataset.voice_dim
        )
        if not cfg.classifier_reinit and (
            n_speakers is None
            or init_arrays["clf.weight"].shape[0] == n_speakers
        ):
            clf = init_arrays["clf.weight"].copy()
        else:
            clf = init_classifier(rng, n_speakers, cfg.out_dim)
    else:
        head_f = MappingHead.init(rng, dataset.face_dim, cfg.out_dim, cfg.p_drop)
        head_v = MappingHead.init(rng, dataset.voice_dim, cfg.out_dim, cfg.p_drop)
        clf = init_classifier(rng, n_speakers, cfg.out_dim)
    return JointParams.create(head_f, head_v, clf, cfg.lr)


def train_with_early_stopping(train_ds, dev_trials, eval_ds, cfg,
                              init_arrays=None):
    """Train joint heads + shared classifier, keeping the best-dev checkpoint.

    Dev trials are scored every `eval_every` steps (plus once before any
    training step); training stops once the count of evaluations without
    improvement exceeds `patience`. Deterministic under cfg.seed.
    """
    cfg.validate()
    if not dev_trials:
        raise ConfigError("dev trial list is empty")
    speakers = train_ds.speakers()
    train_spk = set(speakers)
    for t in dev_trials:
        face = eval_ds.face_by_id.get(t.face_id)
        voice = eval_ds.voice_by_id.get(t.voice_id)
        if face is None or voice is None:
            raise LookupError_(f"dev trial references unknown record")
        if face.speaker_id in train_spk or voice.speaker_id in train_spk:
            raise ConfigError("dev trials must be speaker-disjoint from training")

    speaker_index = {s: i for i, s in enumerate(speakers)}
    params = _init_params(
        train_ds, cfg, init_arrays, n_speakers=len(speakers)
    )
    xf, yf, xv, yv = train_ds.matrices(speaker_index)
    rng = make_rng(cfg.seed)
    labels = [t.label for t in dev_trials]

    def evaluate():
        scores = score_trials(params.head_face, params.head_voice, dev_trials, eval_ds)
        return compute_eer(scores, labels)

    log = []
    report = evaluate()
    best = {"arrays": params.snapshot(), "dev_eer": report.eer, "step": 0}
    log.append({"step": 0, "dev_eer": report.eer})
    no_improve = 0
    for step in range(1, cfg.max_steps + 1):
        fb = rng.integers(0, len(xf), size=min(cfg.batch_size, len(xf)))
        vb = rng.integers(0, len(xv), size=min(cfg.batch_size, len(xv)))
        f_loss, v_loss, _ = joint_step(
            params, xf[fb], yf[fb], xv[vb], yv[vb], cfg.aam, rng
        )
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            report = evaluate()
            log.append(
                {
                    "step": step,
                    "dev_eer": report.eer,
                    "face_loss": f_loss,
                    "voice_loss": v_loss,
                }
            )
            if report.eer < best["dev_eer"]:
                best = {
                    "arrays": params.snapshot(),
                    "dev_eer": report.eer,
                    "step": step,
                }
                no_improve = 0
            else:
                no_improve += 1
                if no_improve > cfg.patience:
                    break
    return best, log


def cross_validate(dataset, cfg, n_folds=7, init_arrays=None):
    """Speaker-disjoint k-fold CV; per-fold dev trials come from the held-out
    fold. When `init_arrays` is given each fold is initialized from it and a
    frozen-initialization baseline EER on the same trials is reported too.
    """
    cfg.validate()
    speakers = dataset.speakers()
    plan = split_folds(speakers, n_folds, make_rng(cfg.seed))
    fold_reports = []
    for f in range(n_folds):
        held = plan.fold_speakers(f)
        train_spk = [s for s in speakers if s not in set(held)]
        train_ds = dataset.subset(train_spk)
        fold_seed = cfg.seed * 1009 + f
        trial_rng = make_rng(fold_seed ^ 0x7 * 0x1001)
        trials = default_dev_trials(dataset, held, cfg, trial_rng)
        fold_cfg = _with_seed(cfg, fold_seed)
        best, log = train_with_early_stopping(
            train_ds, trials, dataset, fold_cfg, init_arrays=init_arrays
        )
        entry = {
            "fold": f,
            "held_out_speakers": held,
            "eer": best["dev_eer"],
            "best_step": best["step"],
            "arrays": best["arrays"],
        }
        if init_arrays is not None:
            head_f = head_from_arrays(init_arrays, "head_face", cfg.p_drop)
            head_v = head_from_arrays(init_arrays, "head_voice", cfg.p_drop)
            scores = score_trials(head_f, head_v, trials, dataset)
            frozen = compute_eer(scores, [t.label for t in trials])
            entry["frozen_init_eer"] = frozen.eer
        fold_reports.append(entry)
    eers = np.array([r["eer"] for r in fold_reports])
    return {
        "folds": fold_reports,
        "mean_eer": float(eers.mean()),
        "std_eer": float(eers.std()),
    }


def _with_seed(cfg, seed):
    import copy

    out = copy.deepcopy(cfg)
    out.seed = seed
    return out


def _dev_speaker_split(speakers, fraction, rng):
    speakers = list(speakers)
    # at least 2 dev speakers, else no cross-speaker dev trials exist
    n_dev = max(2, int(round(fraction * len(speakers))))
    if n_dev >= len(speakers):
        raise ConfigError("dev split would consume every speaker")
    order = rng.permutation(len(speakers))
    dev = sorted(speakers[i] for i in order[:n_dev])
    train = sorted(speakers[i] for i in order[n_dev:])
    return train, dev


def pretrain(dataset, cfg, dev_fraction=0.05, init_arrays=None):
    """Train on a corpus with a speaker-level dev split for early stopping."""
    rng = make_rng(cfg.seed + 0xD5)
    train_spk, dev_spk = _dev_speaker_split(dataset.speakers(), dev_fraction, rng)
    trials = default_dev_trials(dataset, dev_spk, cfg, make_rng(cfg.seed + 0xDE))
    train_ds = dataset.subset(train_spk)
    best, log = train_with_early_stopping(
        train_ds, trials, dataset, cfg, init_arrays=init_arrays
    )
    return best, log, dev_spk


def pretrain_then_finetune(pre_ds, ft_ds, cfg_pre, cfg_ft, n_folds=7,
                           dev_fraction=0.05):
    """Stage 1: pretrain with a 5% speaker dev split. Stage 2: CV fine-tune
    initialized from the stage-1 heads, reporting frozen-head baselines so
    the pre/post fine-tune comparison is explicit."""
    if pre_ds.face_dim != ft_ds.face_dim or pre_ds.voice_dim != ft_ds.voice_dim:
        raise SchemaError(
            "pretrain and finetune corpora have different embedding dims"
        )
    best, log, dev_spk = pretrain(pre_ds, cfg_pre, dev_fraction)
    cv = cross_validate(ft_ds, cfg_ft, n_folds=n_folds, init_arrays=best["arrays"])
    frozen = [r["frozen_init_eer"] for r in cv["folds"]]
    return {
        "pretrain": {
            "dev_eer": best["dev_eer"],
            "best_step": best["step"],
            "dev_speakers": dev_spk,
            "arrays": best["arrays"],
        },
        "finetune": cv,
        "frozen_mean_eer": float(np.mean(frozen)),
    }


# ---------------------------------------------------------------------------
# Scenarios

# Model selection per scenario: the all-data model serves english-heard, the
# English-excluded model serves german-heard, and both unheard scenarios use
# the matching language-excluded corpora with fine-tuning.
SCENARIOS = {
    "english_heard": {
        "test_language": "en",
        "excluded_language": None,
        "finetune": False,
        "unheard": False,
    },
    "german_heard": {
        "test_language": "de",
        "excluded_language": "en",
        "finetune": False,
        "unheard": False,
    },
    "english_unheard": {
        "test_language": "en",
        "excluded_language": "en",
        "finetune": True,
        "unheard": True,
    },
    "german_unheard": {
        "test_language": "de",
        "excluded_language": "de",
        "finetune": True,
        "unheard": True,
    },
}

# Reference challenge results (percent EER), recorded as documentation only;
# they require the real challenge data and are never asserted.
REFERENCE_EER_PERCENT = {
    "overall": 23.99,
    "english_heard": 30.6,
    "german_unheard": 17.4,
    "english_unheard": 30.1,
    "german_heard": 17.9,
}


def audit_manifest(manifest, excluded_language):
    """Record ids of the excluded language present in a training manifest."""
    return [e.record_id for e in manifest.entries if e.language == excluded_language]


def run_scenarios(corpora, test_ds, cfg, n_trials_target=200,
                  n_trials_nontarget=200, dev_fraction=0.1, ft_dev_folds=5):
    """Execute all four scenario recipes and assemble a results table.

    `corpora` maps scenario name to {"pretrain": (manifest, dataset),
    "finetune": (manifest, dataset) or None}. For unheard scenarios every
    consumed manifest is audited against the excluded language; any hit is a
    hard protocol violation.
    """
    cfg.validate()
    results = {}
    for name, recipe in SCENARIOS.items():
        entry = corpora[name]
        pre_manifest, pre_ds = entry["pretrain"]
        ft_entry = entry.get("finetune")
        if recipe["unheard"]:
            consumed = [pre_manifest]
            if recipe["finetune"]:
                if ft_entry is None:
                    raise ConfigError(f"{name}: fine-tune corpus required")
                consumed.append(ft_entry[0])
            for m in consumed:
                bad = audit_manifest(m, recipe["excluded_language"])
                if bad:
                    raise ProtocolViolationError(
                        f"{name}: {len(bad)} {recipe['excluded_language']!r} "
                        f"records in training manifest "
                        f"{m.dataset_name} (first: {bad[0]})"
                    )
        best, _, _ = pretrain(pre_ds, cfg, dev_fraction)
        arrays = best["arrays"]
        if recipe["finetune"]:
            _, ft_ds = ft_entry
            ft_speakers = ft_ds.speakers()
            plan = split_folds(
                ft_speakers, min(ft_dev_folds, len(ft_speakers)), make_rng(cfg.seed)
            )
            dev_spk = plan.fold_speakers(0)
            train_spk = [s for s in ft_speakers if s not in set(dev_spk)]
            trials = default_dev_trials(ft_ds, dev_spk, cfg, make_rng(cfg.seed + 1))
            ft_best, _ = train_with_early_stopping(
                ft_ds.subset(train_spk), trials, ft_ds, cfg, init_arrays=arrays
            )
            arrays = ft_best["arrays"]
        # evaluate on test trials restricted to the scenario's voice language
        scen_test = test_ds.subset(voice_language=recipe["test_language"])
        held = scen_test.speakers()
        trial_rng = make_rng(cfg.seed + 0xE7)
        trial_cfg = _with_seed(cfg, cfg.seed)
        trial_cfg.n_dev_target = n_trials_target
        trial_cfg.n_dev_nontarget = n_trials_nontarget
        trials = default_dev_trials(scen_test, held, trial_cfg, trial_rng)
        head_f = head_from_arrays(arrays, "head_face", cfg.p_drop)
        head_v = head_from_arrays(arrays, "head_voice", cfg.p_drop)
        scores = score_trials(head_f, head_v, trials, scen_test)
        report = compute_eer(scores, [t.label for t in trials])
        results[name] = {
            "eer": report.eer,
            "threshold_at_eer": report.threshold_at_eer,
            "n_target": report.n_target,
            "n_nontarget": report.n_nontarget,
            "finetuned": recipe["finetune"],
            "test_language": recipe["test_language"],
        }
    mean_eer = float(np.mean([r["eer"] for r in results.values()]))
    return {
        "scenarios": results,
        "overall_mean_eer": mean_eer,
        "reference_eer_percent": dict(REFERENCE_EER_PERCENT),
    }


# ---------------------------------------------------------------------------
# Cross-attention training


@dataclass
class XAttnTrainConfig:
    d_model: int = 16
    lr: float = 1e-3
    batch_size: int = 32
    max_steps: int = 500
    patience: int = 5
    eval_every: int = 25
    seed: int = 0
    p_drop: float = 0.0
    residual: bool = True

    def validate(self):
        if self.patience < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("bad cross-attention training config")


def _sample_pairs(dataset, speakers, batch_size, rng):
    """Half same-speaker, half cross-speaker (face, voice) training pairs."""
    spk = list(speakers)
    faces_by_spk = {}
    for c in dataset.face_inputs:
        if c.speaker_id in speakers:
            faces_by_spk.setdefault(c.speaker_id, []).append(c)
    voices_by_spk = {}
    for c in dataset.voice_inputs:
        if c.speaker_id in speakers:
            voices_by_spk.setdefault(c.speaker_id, []).append(c)
    xf, xv, y = [], [], []
    for i in range(batch_size):
        same = i % 2 == 0
        s1 = spk[int(rng.integers(0, len(spk)))]
        if same:
            s2 = s1
        else:
            s2 = spk[int(rng.integers(0, len(spk)))]
            while s2 == s1 and len(spk) > 1:
                s2 = spk[int(rng.integers(0, len(spk)))]
        f = faces_by_spk[s1][int(rng.integers(0, len(faces_by_spk[s1])))]
        v = voices_by_spk[s2][int(rng.integers(0, len(voices_by_spk[s2])))]
        xf.append(f.vector)
        xv.append(v.vector)
        y.append(1.0 if s1 == s2 else 0.0)
    return np.stack(xf), np.stack(xv), np.array(y)


def score_trials_xattn(model, trials, dataset):
    try:
        xf = np.stack([dataset.face_by_id[t.face_id].vector for t in trials])
        xv = np.stack([dataset.voice_by_id[t.voice_id].vector for t in trials])
    except KeyError as exc:
        raise LookupError_(f"unknown trial record id {exc.args[0]}") from exc
    logits, _ = xattn_forward(model, xv, xf, train=False)
    return logits


def train_xattn(train_ds, dev_trials, eval_ds, cfg):
    """Train the cross-attention pair classifier with early stopping.

    Dev trials are scored by the raw logit; EER tracking and the stopping
    rule match train_with_early_stopping.
    """
    cfg.validate()
    if not dev_trials:
        raise ConfigError("dev trial list is empty")
    rng = make_rng(cfg.seed)
    model = XAttnModel.init(
        make_rng(cfg.seed ^ 0x5EED),
        voice_in_dim=train_ds.voice_dim,
        face_in_dim=train_ds.face_dim,
        d_model=cfg.d_model,
        p_drop=cfg.p_drop,
        residual=cfg.residual,
    )
    opt = {
        name: AdamState.for_param(arr, lr=cfg.lr)
        for name, arr in model.param_items()
    }
    opt["out_b"] = AdamState.for_param(np.zeros((1, 1)), lr=cfg.lr)
    speakers = set(train_ds.speakers())
    labels = [t.label for t in dev_trials]

    def snapshot():
        arrays = {name: arr.copy() for name, arr in model.param_items()}
        arrays["out_b"] = np.array([[model.out_b]])
        return arrays

    def evaluate():
        scores = score_trials_xattn(model, dev_trials, eval_ds)
        return compute_eer(scores, labels)

    log = []
    report = evaluate()
    best = {"arrays": snapshot(), "dev_eer": report.eer, "step": 0}
    log.append({"step": 0, "dev_eer": report.eer})
    no_improve = 0
    for step in range(1, cfg.max_steps + 1):
        xf, xv, y = _sample_pairs(train_ds, speakers, cfg.batch_size, rng)
        logits, cache = xattn_forward(model, xv, xf, train=True, rng=rng)
        loss, g_logits = xattn_loss(logits, y)
        grads, _, _ = xattn_backward(model, cache, g_logits)
        for i, layer in enumerate(model.layers):
            for pname in ("wq", "wk", "wv", "wo"):
                key = f"layer{i}.{pname}"
                layer[pname] = adam_step(layer[pname], grads[f"layer{i}"][pname], opt[key])
        model.out_w = adam_step(model.out_w, grads["out_w"], opt["out_w"]).ravel()
        out_b = adam_step(
            np.array([[model.out_b]]), np.array([[grads["out_b"]]]), opt["out_b"]
        )
        model.out_b = float(out_b[0, 0])
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            report = evaluate()
            log.append({"step": step, "dev_eer": report.eer, "loss": loss})
            if report.eer < best["dev_eer"]:
                best = {"arrays": snapshot(), "dev_eer": report.eer, "step": step}
                no_improve = 0
            else:
                no_improve += 1
                if no_improve > cfg.patience:
                    break
    return model, best, log
