"""Closed symbol-level vocabulary for the arithmetic corpus."""

from __future__ import annotations

from dataclasses import dataclass

PAD, BOS, EOS, MASK = "<pad>", "<bos>", "<eos>", "<mask>"
SYMBOLS = ("=", "+", ",", ";")


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if self.tokens[-1] != MASK:
            raise ValueError("the mask token must be the last vocabulary entry")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def arithmetic(cls, max_value: int, names=("a", "b")) -> "Vocab":
        numbers = tuple(str(i) for i in range(max_value + 1))
        return cls((PAD, BOS, EOS) + tuple(names) + SYMBOLS + numbers + (MASK,))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def mask_id(self) -> int:
        return self._index[MASK]

    def encode(self, text: str) -> list[int]:
        """Whitespace-separated symbols; ``,`` and ``;`` may be glued to neighbours."""
        for sym in (",", ";", "=", "+"):
            text = text.replace(sym, f" {sym} ")
        return [self.id(tok) for tok in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def to_list(self) -> list[str]:
        return list(self.tokens)
