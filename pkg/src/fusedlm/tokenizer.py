"""Character tokenizer shared by every specialist.

One fixed alphabet covers all three synthetic domains, so a response string maps
to the same ids no matter which specialist template wraps it.
"""

from __future__ import annotations

import string

import numpy as np

from .errors import VocabError

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")
ALPHABET = "\n" + "".join(chr(c) for c in range(32, 127))


class CharTokenizer:
    def __init__(self, alphabet: str = ALPHABET) -> None:
        self.alphabet = alphabet
        self._ids = {ch: i + len(SPECIALS) for i, ch in enumerate(alphabet)}
        self.vocab_size = len(SPECIALS) + len(alphabet)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._ids[ch] for ch in text]
        except KeyError as e:
            raise VocabError(f"character {e.args[0]!r} is outside the tokenizer alphabet") from None

    def decode(self, ids, keep_specials: bool = False) -> str:
        out = []
        for i in np.asarray(ids, dtype=int).reshape(-1):
            if i < len(SPECIALS):
                if keep_specials:
                    out.append(SPECIALS[i])
            elif i < self.vocab_size:
                out.append(self.alphabet[i - len(SPECIALS)])
            else:
                raise VocabError(f"token id {i} outside vocabulary of {self.vocab_size}")
        return "".join(out)

    def token_str(self, i: int) -> str:
        if i < len(SPECIALS):
            return SPECIALS[i]
        return self.alphabet[i - len(SPECIALS)]

    @staticmethod
    def token_class(ch: str) -> str:
        """Coarse class used by token-level analysis."""
        if ch in string.digits or ch in "+-*/=()":
            return "numeric"
        if ch.isalpha():
            return "alpha"
        if ch.isspace():
            return "space"
        return "other"


DEFAULT_TOKENIZER = CharTokenizer()
