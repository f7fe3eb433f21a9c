"""Few-shot multilingual NLI with discrete, soft and mixed prompting on a toy masked LM."""

__version__ = "0.1.0"
