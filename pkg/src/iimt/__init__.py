"""End-to-end in-image machine translation at desk scale.

Library layout:

- ``autodiff`` / ``nn``: tensor engine and transformer blocks
- ``tokenizer``: discrete visual-token autoencoder (stage-1 training)
- ``model`` / ``teacher`` / ``training``: translation model, distillation
  teacher, and stage-2 multi-task training
- ``glyphs`` / ``synthesis``: bitmap font and paired-image dataset synthesis
- ``ocr`` / ``metrics`` / ``report``: evaluation oracle and metrics
- ``cli``: the ``iimt`` command
"""

__version__ = "0.1.0"
