"""Few-shot sinusoid regression with a bilevel meta-learner, generalization
bound diagnostics and an online follow-the-meta-leader check."""

__version__ = "0.1.0"
