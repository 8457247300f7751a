#!/usr/bin/env python3
"""Generate the bundled desk corpus (train/valid/test).

Produces deterministic English-like prose from a fixed seed: templated
sentences over a zipf-weighted vocabulary, grouped into paragraphs that
reuse topic words. The output is fully synthetic, so it carries no
licensing constraints, while still having word-, sentence- and
paragraph-level statistics for a language model to learn.

Run from the repo root:

    python tools/make_desk_corpus.py
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

NOUNS = """river stone garden house window market bridge mountain valley road
forest harbor letter winter summer morning evening shadow silver copper
engine wheel tower candle mirror school teacher doctor sailor farmer
painter miller hunter singer child brother sister mother father friend
village city island coast meadow orchard cellar kitchen ceiling corner
journey story answer question signal measure pattern record moment season
""".split()

VERBS = """walks runs stands waits turns opens closes carries follows finds
keeps holds builds breaks mends paints draws writes reads sings watches
hears sees knows remembers forgets believes wonders decides learns teaches
brings takes sends leaves enters crosses climbs falls rises rests
""".split()

VERBS_PL = """walk run stand wait turn open close carry follow find
keep hold build break mend paint draw write read sing watch
hear see know remember forget believe wonder decide learn teach
bring take send leave enter cross climb fall rise rest
""".split()

ADJS = """old young quiet small large bright dark heavy light narrow wide
green grey warm cold early late simple plain steady gentle rough smooth
empty full distant near silent patient careful curious honest tired
""".split()

ADVS = """slowly quickly quietly carefully suddenly almost often rarely
again still together alone early late soon never always once twice
""".split()

PREPS = "in on under over near behind beside beyond across through after before".split()

NAMES = "anna peter maria thomas helen oscar clara simon agnes victor".split()


def _zipf_pick(rng, words, n=1):
    ranks = np.arange(1, len(words) + 1, dtype=np.float64)
    w = 1.0 / (ranks + 2.0)
    w /= w.sum()
    idx = rng.choice(len(words), size=n, p=w)
    return [words[i] for i in idx]


class SentenceMaker:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def pick(self, pool, topic=None, p_topic=0.55):
        if topic and self.rng.random() < p_topic:
            return topic[int(self.rng.integers(len(topic)))]
        return _zipf_pick(self.rng, pool)[0]

    def sentence(self, topics) -> str:
        r = self.rng
        noun = lambda: self.pick(NOUNS, topics.get("nouns"))
        adj = lambda: self.pick(ADJS, topics.get("adjs"))
        verb = lambda: _zipf_pick(r, VERBS)[0]
        verb_pl = lambda: _zipf_pick(r, VERBS_PL)[0]
        adv = lambda: _zipf_pick(r, ADVS)[0]
        prep = lambda: PREPS[int(r.integers(len(PREPS)))]
        name = lambda: NAMES[int(r.integers(len(NAMES)))]
        num = lambda: str(int(r.integers(2, 40)))

        forms = [
            lambda: f"the {adj()} {noun()} {verb()} {prep()} the {noun()}",
            lambda: f"the {noun()} {verb()} the {noun()} {adv()}",
            lambda: f"{name()} {verb()} the {adj()} {noun()}",
            lambda: f"the {noun()} and the {noun()} {verb_pl()} {prep()} the {adj()} {noun()}",
            lambda: f"when the {noun()} {verb()} , the {noun()} {verb()} {adv()}",
            lambda: f"{name()} and {name()} {verb_pl()} {prep()} the {noun()}",
            lambda: f"the {noun()} {verb()} {num()} {noun()}s {prep()} the {noun()}",
            lambda: f"a {adj()} {noun()} {adv()} {verb()} the {noun()} {prep()} the {noun()}",
            lambda: f"it was the {adj()} {noun()} that {verb()} the {noun()}",
            lambda: f"the {noun()} {prep()} the {noun()} {verb()} {adv()} , and the {noun()} {verb()}",
        ]
        body = forms[int(r.integers(len(forms)))]()
        end = "." if r.random() < 0.86 else ("?" if r.random() < 0.5 else ";")
        return f"{body} {end}"

    HEADERS = (
        "concerning the {a} and the {b} :",
        "as for the {a} and the {b} :",
        "regarding the {a} and the {b} :",
    )
    CLOSERS = (
        "so ends the tale of the {a} and the {b} .",
        "thus closes the matter of the {a} and the {b} .",
    )

    def paragraph(self) -> list[str]:
        # the closer re-names the header topics; the second one never occurs
        # in the body, so predicting it demands memory of the opening line
        r = self.rng
        a, b = _zipf_pick(r, NOUNS, 2)
        while b == a:
            b = _zipf_pick(r, NOUNS)[0]
        topics = {"nouns": [a], "adjs": _zipf_pick(r, ADJS, 1)}
        head = self.HEADERS[int(r.integers(len(self.HEADERS)))].format(a=a, b=b)
        close = self.CLOSERS[int(r.integers(len(self.CLOSERS)))].format(a=a, b=b)
        body = [self.sentence(topics) for _ in range(int(r.integers(3, 7)))]
        return [head, *body, close]


def make_split(seed: int, target_bytes: int) -> str:
    rng = np.random.Generator(np.random.Philox(seed))
    maker = SentenceMaker(rng)
    lines: list[str] = []
    size = 0
    while size < target_bytes:
        for s in maker.paragraph():
            lines.append(s)
            size += len(s) + 1
    return "\n".join(lines) + "\n"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="src/ltmlab/corpora/desk")
    ap.add_argument("--train-bytes", type=int, default=100_000)
    ap.add_argument("--eval-bytes", type=int, default=10_000)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, seed, nbytes in (
        ("train.txt", 101, args.train_bytes),
        ("valid.txt", 202, args.eval_bytes),
        ("test.txt", 303, args.eval_bytes),
    ):
        text = make_split(seed, nbytes)
        (out / name).write_text(text, encoding="utf-8")
        print(f"{out / name}: {len(text.encode('utf-8'))} bytes, "
              f"{len(text.splitlines())} lines")


if __name__ == "__main__":
    main()
