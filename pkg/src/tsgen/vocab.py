"""Closed word-level vocabulary shared by the text pathway and the language model.

Tokenization is lowercase word-level: alphanumeric runs (hyphen/apostrophe
joined, so "class-0" is one token) or single punctuation marks. The
vocabulary is built once from all text the system can see at setup time
(prompt sections, label texts, answer templates); unknown tokens at encode
time map to <unk>.
"""

from __future__ import annotations

import re
from typing import Iterable

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:[-'][a-z0-9]+)*|[^\sa-z0-9]")
_NO_SPACE_BEFORE = set(".,!?;:)]}'")
_NO_SPACE_AFTER = set("([{")


def tokenize(text: str) -> list[str]:
    """Lowercase word-level split; hyphenated words stay intact."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Iterable[str]) -> str:
    """Space-join with punctuation re-attached; inverse enough of `tokenize`
    that canonical label strings survive a round trip."""
    out: list[str] = []
    for tok in tokens:
        if tok in SPECIALS:
            continue
        if out and (tok in _NO_SPACE_BEFORE or out[-1] in _NO_SPACE_AFTER):
            out[-1] = out[-1] + tok
        else:
            out.append(tok)
    return " ".join(out)


class WordVocab:
    """Frozen token <-> id mapping with reserved specials at ids 0..3."""

    def __init__(self, tokens: Iterable[str]):
        seen: list[str] = []
        have = set(SPECIALS)
        for tok in tokens:
            if tok not in have:
                have.add(tok)
                seen.append(tok)
        self._id_to_token = list(SPECIALS) + sorted(seen)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "WordVocab":
        toks: list[str] = []
        for text in texts:
            toks.extend(tokenize(text))
        return cls(toks)

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    @property
    def pad_id(self) -> int:
        return self._token_to_id[PAD]

    @property
    def bos_id(self) -> int:
        return self._token_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self._token_to_id[EOS]

    @property
    def unk_id(self) -> int:
        return self._token_to_id[UNK]

    def encode(self, text: str, bos: bool = False, eos: bool = False) -> list[int]:
        ids = [self._token_to_id.get(t, self.unk_id) for t in tokenize(text)]
        if bos:
            ids.insert(0, self.bos_id)
        if eos:
            ids.append(self.eos_id)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return detokenize(self._id_to_token[i] for i in ids)

    def decode_until_eos(self, ids: Iterable[int]) -> str:
        kept = []
        for i in ids:
            if i == self.eos_id:
                break
            kept.append(i)
        return self.decode(kept)

    def tokens(self) -> list[str]:
        return list(self._id_to_token)

    def to_config(self) -> dict:
        return {"tokens": self._id_to_token[len(SPECIALS):]}

    @classmethod
    def from_config(cls, config: dict) -> "WordVocab":
        return cls(config["tokens"])
