"""transferbench: train classifiers at varying robustness levels, craft
targeted/untargeted/representation-targeted adversarial examples with a
momentum + diverse-input + gradient-smoothing sign-step optimizer, and
measure how well they transfer across models."""

__version__ = "0.1.0"
