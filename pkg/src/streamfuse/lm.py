"""Character n-gram LM with add-k smoothing interpolated down to uniform.

    P_j(w | h) = (c(h, w) + k*D*P_{j-1}(w | h')) / (c(h) + k*D)

where ``h'`` drops the oldest token of ``h`` and ``P_0 = 1/D``. An unseen
context has ``c(h) = 0`` and so falls back to the lower order exactly.
Histories are left-padded with bos.
"""
import math
import struct

import numpy as np

from . import vocab

MAGIC = b"NGLM0001"


class LMFormatError(ValueError):
    pass


class NgramLM:
    def __init__(self, order=5, k=0.1, symbols=None, tables=None):
        if order < 1:
            raise ValueError("order must be >= 1")
        if k <= 0:
            raise ValueError("k must be positive")
        self.order = int(order)
        self.k = float(k)
        self.symbols = list(symbols if symbols is not None else vocab.SYMBOLS)
        # tables[j]: context tuple of length j -> {token: count}
        self.tables = tables if tables is not None else [dict() for _ in range(self.order)]
        self._cache = {}

    @property
    def vocab_size(self):
        return len(self.symbols)

    def _history(self, prefix):
        ids = list(prefix)
        while ids and ids[0] == vocab.BOS:
            ids.pop(0)
        n = self.order - 1
        if n == 0:
            return ()
        hist = [vocab.BOS] * n + ids
        return tuple(hist[-n:])

    def prob(self, prefix):
        """Next-token distribution [D] after ``prefix``."""
        h = self._history(prefix)
        hit = self._cache.get(h)
        if hit is not None:
            return hit
        D = self.vocab_size
        kd = self.k * D
        p = np.full(D, 1.0 / D)
        for j in range(self.order):
            ctx = h[len(h) - j:] if j else ()
            row = self.tables[j].get(ctx)
            if not row:
                continue
            c = np.zeros(D)
            for tok, n in row.items():
                c[tok] = n
            p = (c + kd * p) / (c.sum() + kd)
        self._cache[h] = p
        return p

    def logprob(self, prefix):
        return np.log(self.prob(prefix))

    def sequence_logprob(self, text):
        ids = vocab.encode(text) + [vocab.EOS]
        hist = [vocab.BOS]
        total = 0.0
        for t in ids:
            total += math.log(self.prob(hist)[t])
            hist.append(t)
        return total

    # ---------------------------------------------------------- serialisation

    def to_bytes(self):
        out = [MAGIC, struct.pack("<Id", self.order, self.k), struct.pack("<I", len(self.symbols))]
        for s in self.symbols:
            raw = s.encode("utf-8")
            out.append(struct.pack("<H", len(raw)) + raw)
        for j, table in enumerate(self.tables):
            out.append(struct.pack("<I", len(table)))
            for ctx in sorted(table):
                row = table[ctx]
                out.append(struct.pack(f"<{j}H", *ctx))
                out.append(struct.pack("<I", len(row)))
                for tok in sorted(row):
                    out.append(struct.pack("<HI", tok, row[tok]))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf):
        try:
            return cls._parse(buf)
        except (struct.error, UnicodeDecodeError) as exc:
            raise LMFormatError(f"corrupt LM file: {exc}") from None

    @classmethod
    def _parse(cls, buf):
        if buf[:8] != MAGIC:
            raise LMFormatError("bad LM file magic")
        pos = 8
        order, k = struct.unpack_from("<Id", buf, pos)
        pos += 12
        (nsym,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        symbols = []
        for _ in range(nsym):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            symbols.append(buf[pos:pos + n].decode("utf-8"))
            pos += n
        tables = []
        for j in range(order):
            (nctx,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            table = {}
            for _ in range(nctx):
                ctx = struct.unpack_from(f"<{j}H", buf, pos)
                pos += 2 * j
                (nrow,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                row = {}
                for _ in range(nrow):
                    tok, cnt = struct.unpack_from("<HI", buf, pos)
                    pos += 6
                    row[tok] = cnt
                table[tuple(ctx)] = row
            tables.append(table)
        if pos != len(buf):
            raise LMFormatError("trailing bytes in LM file")
        return cls(order, k, symbols, tables)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def lm_train(lines, order=5, k=0.1):
    """Count n-grams over transcripts (one per item). No lines -> uniform model."""
    lm = NgramLM(order, k)
    pad = [vocab.BOS] * (order - 1)
    for text in lines:
        text = text.strip("\n")
        if not text:
            continue
        seq = pad + vocab.encode(text) + [vocab.EOS]
        for i in range(order - 1, len(seq)):
            tok = seq[i]
            for j in range(order):
                ctx = tuple(seq[i - j:i])
                row = lm.tables[j].setdefault(ctx, {})
                row[tok] = row.get(tok, 0) + 1
    return lm


def lm_logprob(lm, prefix):
    return lm.logprob(prefix)
