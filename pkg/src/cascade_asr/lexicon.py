"""Vocabularies and word / syllable / phoneme mappings.

Transcripts (pre-segmented word sequences) are converted to sub-word unit
sequences directly through the lexicon: each word expands to its first
listed pronunciation, syllables optionally decompose further into
initial/final phonemes carrying the tone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ContractError, ParseError

UNK = "<UNK>"
PAD = "<PAD>"
SOS = "<S>"
EOS = "</S>"
SPECIALS = (PAD, UNK, SOS, EOS)


@dataclass
class Vocabulary:
    symbols: list
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {s: i for i, s in enumerate(self.symbols)}
        for s in SPECIALS:
            if self.symbols.count(s) != 1:
                raise ContractError(f"special token {s} must appear "
                                    f"exactly once")

    def __len__(self):
        return len(self.symbols)

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def unk_id(self):
        return self.index[UNK]

    @property
    def sos_id(self):
        return self.index[SOS]

    @property
    def eos_id(self):
        return self.index[EOS]

    def encode(self, symbols, add_markers=True):
        ids = [self.index.get(s, self.unk_id) for s in symbols]
        if add_markers:
            ids = [self.sos_id] + ids + [self.eos_id]
        return TokenSequence(level="", ids=ids, vocab=self)

    def decode(self, ids, strip_markers=True):
        out = [self.symbols[i] for i in ids]
        if strip_markers:
            out = [s for s in out if s not in (SOS, EOS, PAD)]
        return out

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for s in self.symbols:
                f.write(s + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            symbols = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(symbols=symbols)


@dataclass
class TokenSequence:
    level: str                # "phoneme" | "syllable" | "word" | ""
    ids: list
    vocab: Vocabulary = None

    def __len__(self):
        return len(self.ids)


def build_vocab(units):
    """Deterministic vocabulary: the 4 specials, then sorted unique units."""
    units = sorted(set(units) - set(SPECIALS))
    if not units:
        raise ContractError("empty unit inventory")
    return Vocabulary(symbols=list(SPECIALS) + units)


@dataclass
class Lexicon:
    word_prons: dict          # word -> list of pronunciations (syllable lists)
    syllable_phones: dict     # syllable -> phoneme list

    def pronunciation(self, word):
        prons = self.word_prons.get(word)
        return prons[0] if prons else None

    def syllable_inventory(self):
        return sorted(self.syllable_phones)

    def phoneme_inventory(self):
        return sorted({p for ph in self.syllable_phones.values() for p in ph})

    def word_inventory(self):
        return sorted(self.word_prons)


def load_lexicon(lexicon_path, syllable_table_path):
    """Parse the word lexicon and syllable decomposition table.

    Lexicon: one `word syl1 syl2 ...` entry per line (repeat lines add
    alternative pronunciations).  Table: `syllable ph1 ph2 ...` per line.
    """
    syllable_phones = {}
    with open(syllable_table_path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            syl, phones = parts[0], parts[1:]
            if not phones:
                raise ParseError(f"{syllable_table_path}:{ln}: syllable "
                                 f"{syl!r} has no phonemes")
            if syl in syllable_phones and syllable_phones[syl] != phones:
                raise ParseError(f"{syllable_table_path}:{ln}: conflicting "
                                 f"decomposition for {syl!r}")
            syllable_phones[syl] = phones
    word_prons = {}
    with open(lexicon_path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            word, syls = parts[0], parts[1:]
            if not syls:
                raise ParseError(f"{lexicon_path}:{ln}: word {word!r} has "
                                 f"no pronunciation")
            for syl in syls:
                if syl not in syllable_phones:
                    raise ParseError(f"{lexicon_path}:{ln}: unknown "
                                     f"syllable {syl!r}")
            word_prons.setdefault(word, [])
            if syls not in word_prons[word]:
                word_prons[word].append(syls)
    return Lexicon(word_prons=word_prons, syllable_phones=syllable_phones)


def word_to_units(word, lex, level):
    """First-pronunciation expansion of one word; None when OOV."""
    pron = lex.pronunciation(word)
    if pron is None:
        return None
    if level == "syllable":
        return list(pron)
    if level == "phoneme":
        return [p for syl in pron for p in lex.syllable_phones[syl]]
    raise ContractError(f"unknown unit level {level!r}")


def transcript_to_units(words, lex, level, vocab):
    """Word sequence -> unit TokenSequence wrapped in <S> ... </S>.

    OOV words contribute a single UNK token.
    """
    ids = [vocab.sos_id]
    for word in words:
        units = word_to_units(word, lex, level)
        if units is None:
            ids.append(vocab.unk_id)
        else:
            ids.extend(vocab.index.get(u, vocab.unk_id) for u in units)
    ids.append(vocab.eos_id)
    return TokenSequence(level=level, ids=ids, vocab=vocab)
