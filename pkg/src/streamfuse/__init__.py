"""Stream fusion and multi-encoder learning for transformer speech recognition."""
