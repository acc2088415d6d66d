"""tierspace: hierarchical entailment text representations at desk scale.

Library layout:

- ``autodiff``: reverse-mode AD over dense float64 tensors
- ``optim``: AdamW
- ``geometry``: exterior angles and tier-hierarchy objectives
- ``encoder`` / ``lora``: tokenizer-to-features stub with low-rank adapters
- ``disentangle``: three-component cross-attention module and its loss
- ``synthdata``: tiered caption/scene generator with hard negatives
- ``grounding``: toy query-to-proposal detector, detection losses, AP
- ``config`` / ``training`` / ``cli``: run configuration, loops, commands
"""

__version__ = "0.1.0"
