"""Closed word-level vocabulary shared by the text encoder and the datasets.

Real byte-pair tokenizers are out of scope at this scale; captions are
whitespace-tokenized over a fixed word list.  Class names are single
words drawn from :data:`CLASS_WORDS`, so every caption the package can
produce tokenizes exactly.
"""

from __future__ import annotations

from .errors import InputError

TEMPLATE_WORDS = ("a", "photo", "of")

# One word per synthetic class; families slice this pool without overlap.
CLASS_WORDS = (
    "dog", "cat", "bird", "fish", "tree", "rock", "star", "moon",
    "boat", "car", "house", "lamp", "door", "book", "cup", "key",
    "leaf", "cloud", "river", "hill", "snake", "horse", "sheep", "crab",
    "frog", "bee", "ant", "owl", "fox", "wolf", "bear", "deer",
    "mouse", "shell", "stone", "grass", "sand", "wave", "flame", "coin",
    "bell", "drum", "flag", "kite", "ring", "rope", "sock", "shoe",
)

_FILLER_WORDS = (
    "the", "and", "on", "in", "is", "with", "small", "big",
    "red", "blue", "green", "dark", "light",
)

WORDS = TEMPLATE_WORDS + CLASS_WORDS + _FILLER_WORDS

_WORD_TO_ID = {w: i for i, w in enumerate(WORDS)}

VOCAB_SIZE = len(WORDS)


def token_id(word: str) -> int:
    try:
        return _WORD_TO_ID[word]
    except KeyError:
        raise InputError(f"word {word!r} is not in the vocabulary") from None


def encode_words(text: str) -> list[int]:
    """Whitespace tokenization; unknown words raise an input error."""
    return [token_id(w) for w in text.split()]


def template_tokens(class_name: str) -> list[int]:
    """Token ids of the fixed caption 'a photo of a <class>'."""
    return encode_words(f"a photo of a {class_name}")


# Length of the template prefix before the class word ("a photo of a").
TEMPLATE_PREFIX_LEN = 4


def template_prefix_tokens() -> list[int]:
    return encode_words("a photo of a")
