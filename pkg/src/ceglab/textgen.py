"""Deterministic pseudo-English corpus synthesis.

Stands in for a real text file when none is at hand (this repo trains
byte-level models, so any text with recurring word structure works).
Words are built from syllables, drawn with a Zipf-like weighting, and
assembled into sentences and paragraphs; the byte stream is a pure
function of (size, seed).
"""

from __future__ import annotations

import numpy as np

_ONSETS = ["b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s",
           "t", "v", "w", "br", "ch", "cl", "dr", "fl", "gr", "pl", "pr", "sh",
           "sl", "sp", "st", "th", "tr", ""]
_NUCLEI = ["a", "e", "i", "o", "u", "ai", "ea", "ee", "io", "ou"]
_CODAS = ["", "", "b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t",
          "ck", "ld", "ll", "nd", "ng", "nt", "rd", "rt", "ss", "st"]
_SUFFIXES = ["", "", "", "", "s", "ed", "ing", "er", "ly"]


def _build_lexicon(rng: np.random.Generator, size: int) -> list[str]:
    words = set()
    while len(words) < size:
        syllables = rng.integers(1, 4)
        word = "".join(
            _ONSETS[rng.integers(len(_ONSETS))]
            + _NUCLEI[rng.integers(len(_NUCLEI))]
            + _CODAS[rng.integers(len(_CODAS))]
            for _ in range(syllables)
        )
        if 2 <= len(word) <= 12:
            words.add(word)
    return sorted(words)


def synthesize_corpus(size_bytes: int, seed: int = 0) -> bytes:
    """Generate at least size_bytes of sentence-structured ASCII text."""
    rng = np.random.default_rng(seed)
    lexicon = _build_lexicon(rng, 2000)
    ranks = np.arange(1, len(lexicon) + 1, dtype=np.float64)
    weights = 1.0 / ranks  # Zipf
    weights /= weights.sum()

    chunks: list[str] = []
    total = 0
    sentences_in_paragraph = 0
    paragraph_len = int(rng.integers(3, 9))
    while total < size_bytes:
        n_words = int(rng.integers(4, 15))
        picks = rng.choice(len(lexicon), size=n_words, p=weights)
        words = [lexicon[i] + _SUFFIXES[rng.integers(len(_SUFFIXES))] for i in picks]
        words[0] = words[0].capitalize()
        if n_words > 7 and rng.random() < 0.5:
            words[n_words // 2] += ","
        end = "." if rng.random() < 0.85 else ("?" if rng.random() < 0.5 else "!")
        sentence = " ".join(words) + end
        sentences_in_paragraph += 1
        if sentences_in_paragraph >= paragraph_len:
            sentence += "\n\n"
            sentences_in_paragraph = 0
            paragraph_len = int(rng.integers(3, 9))
        else:
            sentence += " "
        chunks.append(sentence)
        total += len(sentence)
    return "".join(chunks).encode("ascii")
