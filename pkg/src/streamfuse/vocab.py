"""Character vocabulary: bos, eos, space, a-z (D = 29)."""
import string

BOS, EOS, SPACE = 0, 1, 2
SYMBOLS = ["<bos>", "<eos>", " "] + list(string.ascii_lowercase)
SIZE = len(SYMBOLS)
_index = {s: i for i, s in enumerate(SYMBOLS)}


def encode(text):
    """Transcript -> ids without bos/eos."""
    try:
        return [_index[c] for c in text]
    except KeyError as exc:
        raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None


def decode(ids):
    return "".join(SYMBOLS[i] for i in ids if i not in (BOS, EOS))
