"""Regenerate the bundled toy parallel corpus (src/semunit/data/toy.{src,tgt,align}).

The target side is an invented SOV language: adverbial, subject, object,
verb. Several source phrases map to a single target word, so they only
translate correctly as a unit. toy.align holds the word alignment known by
construction: 1-based i-j sure links, i?j possible links for articles.
"""

import random
from pathlib import Path

SUBJECTS = {
    "the teacher": "lehra",
    "my brother": "bruda mi",
    "a young doctor": "doktori yun",
    "the old farmer": "bauro alt",
    "our neighbours": "nachbarin nos",
    "the children": "kindor",
}
VERBS = {
    "visited": "besuchta",
    "painted": "malta",
    "photographed": "fotografirta",
    "remembered": "erinerta",
    "described": "beshribta",
    "crossed": "kwerta",
}
OBJECTS = {
    "new york": "nuyorka",
    "the picket line": "streikwacht",
    "the ice cream shop": "gelateria",
    "the high school": "gimnasio",
    "the swimming pool": "schwimbad",
    "los angeles": "losanjela",
    "the train station": "banhofu",
}
ADVERBS = {
    "yesterday": "gestra",
    "last summer": "sommerpast",
    "every morning": "morgensal",
    "in the evening": "abendu",
}


ARTICLES = {"the", "a", "in"}


def phrase_links(src_words, tgt_words):
    """Word links inside one phrase pair, 0-based."""
    content = [i for i, w in enumerate(src_words) if w not in ARTICLES]
    links = []
    if len(tgt_words) == 1:
        for i, w in enumerate(src_words):
            links.append((i, 0, "P" if w in ARTICLES else "S"))
        return links
    # two-word targets put the head noun first
    for j, i in enumerate(reversed(content)):
        links.append((i, j, "S"))
    for i, w in enumerate(src_words):
        if w in ARTICLES:
            links.append((i, 0, "P"))
    return links


def main(n=200, seed=7):
    rng = random.Random(seed)
    combos = [(a, s, v, o) for a in ADVERBS for s in SUBJECTS for v in VERBS for o in OBJECTS]
    rng.shuffle(combos)
    src, tgt, align = [], [], []
    for a, s, v, o in combos[:n]:
        src_order = [s, v, o, a]
        tgt_order = [a, s, o, v]
        table = {**ADVERBS, **SUBJECTS, **VERBS, **OBJECTS}
        src_off, tgt_off, off = {}, {}, 0
        for ph in src_order:
            src_off[ph] = off
            off += len(ph.split())
        off = 0
        for ph in tgt_order:
            tgt_off[ph] = off
            off += len(table[ph].split())
        links = []
        for ph in src_order:
            for i, j, lab in phrase_links(ph.split(), table[ph].split()):
                links.append((src_off[ph] + i, tgt_off[ph] + j, lab))
        src.append(" ".join(src_order))
        tgt.append(" ".join(table[ph] for ph in tgt_order))
        align.append(" ".join(f"{i + 1}{'-' if lab == 'S' else '?'}{j + 1}" for i, j, lab in sorted(links)))
    out = Path(__file__).resolve().parents[1] / "src" / "semunit" / "data"
    out.mkdir(parents=True, exist_ok=True)
    (out / "toy.src").write_text("\n".join(src) + "\n", encoding="utf-8")
    (out / "toy.tgt").write_text("\n".join(tgt) + "\n", encoding="utf-8")
    (out / "toy.align").write_text("\n".join(align) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
