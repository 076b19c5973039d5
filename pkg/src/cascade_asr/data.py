"""Dataset manifest: one tab-separated record per utterance."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ParseError


@dataclass
class Utterance:
    utterance_id: str
    wav_path: str
    speaker_id: str
    transcript: str           # whitespace-separated words

    @property
    def words(self):
        return self.transcript.split()


def read_manifest(path):
    """utterance_id \\t wav_path \\t speaker_id \\t transcript per line."""
    records = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"{path}:{ln}: expected 4 tab-separated "
                                 f"fields, got {len(parts)}")
            records.append(Utterance(*parts))
    return records


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write("\t".join([r.utterance_id, r.wav_path, r.speaker_id,
                               r.transcript]) + "\n")
