"""Iterative co-training of a CTC recognizer and a voice-conversion model."""

try:
    # Wheel layout: the extension lives inside the package.
    from ._itervc import (
        ConfigError,
        IterVcError,
        ctc_loss,
        ctc_loss_grad,
        generate_synthetic_corpus,
        has_converged,
        history_table,
        identity_similarity,
        iterate,
        load_manifest,
        melspectrogram,
        word_error_rate,
    )
except ImportError:
    # In-tree builds put the extension on PYTHONPATH directly.
    from _itervc import (
        ConfigError,
        IterVcError,
        ctc_loss,
        ctc_loss_grad,
        generate_synthetic_corpus,
        has_converged,
        history_table,
        identity_similarity,
        iterate,
        load_manifest,
        melspectrogram,
        word_error_rate,
    )

__all__ = [
    "ConfigError",
    "IterVcError",
    "ctc_loss",
    "ctc_loss_grad",
    "generate_synthetic_corpus",
    "has_converged",
    "history_table",
    "identity_similarity",
    "iterate",
    "load_manifest",
    "melspectrogram",
    "word_error_rate",
]
