"""Desk-scale multi-talker ASR: serialized CTC prompting and gated cross-attention adapters."""

__version__ = "0.1.0"
