"""Deterministic pseudo-English text generator for the shipped sample corpus.

The output has word-level regularities (agreement, recurring topic nouns
within a paragraph, quoted speech) so a small byte-level model can learn
something that pruning then measurably damages.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

NAMES = ["Ada", "Bram", "Clara", "Dov", "Elin", "Fenn", "Greta", "Hugo", "Iris", "Jonas",
         "Kira", "Lev", "Mara", "Nils", "Orla", "Piet"]
PLACES = ["the mill", "the river", "the old bridge", "the market", "the orchard", "the harbor",
          "the chapel", "the forge", "the meadow", "the granary", "the lighthouse", "the square"]
NOUNS = ["lantern", "basket", "letter", "horse", "boat", "garden", "window", "candle", "wagon",
         "bell", "map", "kettle", "ladder", "fence", "barrel", "coat", "key", "book", "net", "cart"]
ADJS = ["small", "heavy", "quiet", "bright", "old", "narrow", "warm", "cold", "broken", "green",
        "tall", "dusty", "painted", "wooden", "silver", "empty"]
VERBS_T = [("carried", "carries"), ("mended", "mends"), ("found", "finds"), ("painted", "paints"),
           ("opened", "opens"), ("sold", "sells"), ("lifted", "lifts"), ("cleaned", "cleans"),
           ("watched", "watches"), ("pulled", "pulls"), ("kept", "keeps"), ("hid", "hides")]
VERBS_I = [("waited", "waits"), ("walked", "walks"), ("laughed", "laughs"), ("slept", "sleeps"),
           ("worked", "works"), ("sang", "sings"), ("listened", "listens"), ("rested", "rests")]
ADVS = ["slowly", "quietly", "early", "again", "carefully", "at dawn", "before supper",
        "all morning", "in the rain", "without a word"]
TIMES = ["In the morning", "At noon", "Later that day", "When the bells rang", "After the storm",
         "On the first day of spring", "Before the frost", "That evening"]
WEATHER = ["the wind was high", "the sky was grey", "the sun was warm", "the rain had stopped",
           "the fog lay on the water", "the snow was deep"]
NUMBERS = ["two", "three", "four", "five", "seven", "ten", "twelve"]


class _Writer:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def chance(self, p: float) -> bool:
        return bool(self.rng.random() < p)

    def noun_phrase(self, topic: str | None = None) -> str:
        noun = topic if topic is not None and self.chance(0.55) else self.pick(NOUNS)
        if self.chance(0.3):
            return f"{self.pick(NUMBERS)} {self.pick(ADJS)} {noun}s"
        det = "the" if self.chance(0.6) else "a"
        adj = self.pick(ADJS)
        if det == "a" and adj[0] in "aeiou":
            det = "an"
        return f"{det} {adj} {noun}" if self.chance(0.7) else f"the {noun}"

    def clause(self, subject: str, topic: str, present: bool) -> str:
        tense = 1 if present else 0
        if self.chance(0.65):
            verb = self.pick(VERBS_T)[tense]
            out = f"{subject} {verb} {self.noun_phrase(topic)}"
        else:
            verb = self.pick(VERBS_I)[tense]
            out = f"{subject} {verb}"
        if self.chance(0.5):
            out += f" near {self.pick(PLACES)}"
        if self.chance(0.35):
            out += f" {self.pick(ADVS)}"
        return out

    def sentence(self, topic: str, people: list[str]) -> str:
        who = self.pick(people)
        r = self.rng.random()
        if r < 0.15:
            return f"{self.pick(TIMES)}, {self.pick(WEATHER)}, and {self.clause(who, topic, False)}."
        if r < 0.3:
            other = self.pick([n for n in NAMES if n != who])
            if self.chance(0.5):
                said = f"The {topic} is {self.pick(ADJS)}"
            else:
                said = self.clause(self.pick(people + ["She", "He"]), topic, True)
            return f'"{said}," said {who} to {other}.'
        if r < 0.45:
            return f"{self.clause(who, topic, False)}, because {self.clause('nobody', topic, False)}."
        if r < 0.55:
            return f"The {topic} was {self.pick(ADJS)}, and {who} knew it."
        return f"{self.clause(who, topic, False)}."

    def paragraph(self) -> str:
        topic = self.pick(NOUNS)
        people = [self.pick(NAMES) for _ in range(int(self.rng.integers(1, 4)))]
        n = int(self.rng.integers(3, 8))
        return " ".join(self.sentence(topic, people) for _ in range(n))


def generate(n_bytes: int = 120_000, seed: int = 20240601) -> str:
    w = _Writer(seed)
    parts: list[str] = []
    size = 0
    chapter = 1
    while size < n_bytes:
        if chapter == 1 or w.chance(0.08):
            head = f"Chapter {chapter}\n\n"
            parts.append(head)
            size += len(head)
            chapter += 1
        para = w.paragraph() + "\n\n"
        parts.append(para)
        size += len(para)
    return "".join(parts)[:n_bytes]


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--bytes", type=int, default=120_000)
    ap.add_argument("--seed", type=int, default=20240601)
    args = ap.parse_args(argv)
    args.out.write_text(generate(args.bytes, args.seed), encoding="ascii")


if __name__ == "__main__":
    main()
