"""Face-voice association toolkit: embedding fusion heads trained against a
shared angular-margin classifier, cosine verification scoring, EER
evaluation, and heard/unheard cross-validation protocols."""

__version__ = "0.1.0"
