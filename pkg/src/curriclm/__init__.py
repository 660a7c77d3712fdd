"""curriclm: staged-curriculum training of small dialog language models.

The toolchain covers the whole loop: delimited-field dialog grammars,
pseudo-supervised corpus fabrication from forum threads, word-level
tokenization, a compact decoder-only language model, ordered curriculum
training with plateau early stopping, and task-oriented dialog metrics
(BLEU / INFORM / SUCCESS / COMBINED).
"""

__version__ = "0.1.0"
