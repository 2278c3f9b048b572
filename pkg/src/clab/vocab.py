"""Character vocabulary shared by the data generator and the model."""

from __future__ import annotations

import string

TEXT_SYMBOLS = string.ascii_lowercase + " '"
SOT, EOT, PAD = "<sot>", "<eot>", "<pad>"
N_CODES = 8
LANG_CODES = tuple(f"<L{i}>" for i in range(N_CODES))

DEFAULT_VOCAB = tuple(TEXT_SYMBOLS) + (SOT, EOT, PAD) + LANG_CODES


def is_code(token: str) -> bool:
    return token.startswith("<L") and token.endswith(">")


class Vocab:
    """Symbol <-> id mapping with the special-token classes resolved."""

    def __init__(self, symbols=DEFAULT_VOCAB):
        self.symbols = tuple(symbols)
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")
        self.index = {s: i for i, s in enumerate(self.symbols)}
        for tok in (SOT, EOT, PAD):
            if tok not in self.index:
                raise ValueError(f"vocabulary lacks {tok}")
        self.codes = tuple(s for s in self.symbols if is_code(s))
        if not self.codes:
            raise ValueError("vocabulary lacks language-code tokens")
        self.text = tuple(s for s in self.symbols if len(s) == 1)
        if not self.text:
            raise ValueError("vocabulary lacks text symbols")
        self.sot, self.eot, self.pad = self.index[SOT], self.index[EOT], self.index[PAD]

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"symbol {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.symbols[i] for i in ids)

    def code_id(self, token: str) -> int:
        if token not in self.index or not is_code(token):
            raise ValueError(f"unknown language code {token!r}")
        return self.index[token]
