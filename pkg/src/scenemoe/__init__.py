"""Scene-expert mixture with causal attention for video sentiment analysis.

Library layout:

- numerics: float64 tensor ops with analytic backward + gradient checker
- synthgen: synthetic confounded omni-scene dataset generator and loader
- experts:  the four per-channel transformer experts
- sbm:      soft scene routing and the balance-regularized router loss
- iec:      causal attention block (self/cross sampling over a k-means
            dictionary) and the dictionary builder
- trainer:  two-stage optimization, full forward pass, interval decoding,
            checkpoints
- metrics:  identification/localization/attribution evaluation suite
- cli:      `scenemoe` command line (gen / train / predict / eval /
            ablate / gradcheck)
"""

__version__ = "0.1.0"
