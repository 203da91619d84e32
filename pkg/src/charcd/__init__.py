"""Character-level morphological taggers with contextual decomposition.

Train char-CNN / char-BiLSTM word classifiers, then attribute each
prediction to subsets of input characters exactly (the relevant and
irrelevant parts sum back to the original logits).
"""

__version__ = "0.1.0"
