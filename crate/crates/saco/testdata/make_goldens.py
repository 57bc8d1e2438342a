#!/usr/bin/env python3
"""Generates the frozen metric golden files for the 10-item fixture.

The scorers below are a line-faithful port of the public COCO caption
evaluation toolkit (BLEU with the "closest" reference-length convention,
ROUGE-L with beta=1.2, CIDEr-D with sigma=6 and the x10 scale), kept
independent of the Rust implementation so the goldens act as an oracle.

Run from this directory:  python3 make_goldens.py
Outputs: metrics_fixture.json, metrics_oracle.json
"""

import json
import math
from collections import defaultdict

N = 4
SMALL = 1e-9
TINY = 1e-15
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0


def precook(s, n=N):
    words = s.split()
    counts = defaultdict(int)
    for k in range(1, n + 1):
        for i in range(len(words) - k + 1):
            counts[tuple(words[i:i + k])] += 1
    return len(words), counts


def bleu(candidates, references):
    """Corpus BLEU-1..4, closest reference length, cumulative precisions."""
    total_guess = [0] * N
    total_correct = [0] * N
    total_testlen = 0
    total_reflen = 0
    for cand, refs in zip(candidates, references):
        testlen, counts = precook(cand)
        reflens = []
        maxcounts = {}
        for ref in refs:
            rl, rcounts = precook(ref)
            reflens.append(rl)
            for ngram, cnt in rcounts.items():
                maxcounts[ngram] = max(maxcounts.get(ngram, 0), cnt)
        reflen = min(((abs(l - testlen), l) for l in reflens))[1]
        total_testlen += testlen
        total_reflen += reflen
        for k in range(N):
            total_guess[k] += max(0, testlen - k)
        for ngram, cnt in counts.items():
            total_correct[len(ngram) - 1] += min(maxcounts.get(ngram, 0), cnt)
    bleus = []
    prod = 1.0
    for k in range(N):
        prod *= (total_correct[k] + TINY) / (total_guess[k] + SMALL)
        bleus.append(prod ** (1.0 / (k + 1)))
    ratio = (total_testlen + TINY) / (total_reflen + SMALL)
    if ratio < 1:
        bleus = [b * math.exp(1 - 1 / ratio) for b in bleus]
    return bleus


def lcs_len(a, b):
    rows = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                rows[i][j] = rows[i - 1][j - 1] + 1
            else:
                rows[i][j] = max(rows[i - 1][j], rows[i][j - 1])
    return rows[len(a)][len(b)]


def rouge_l(candidates, references):
    scores = []
    for cand, refs in zip(candidates, references):
        toks_c = cand.split()
        precs, recs = [], []
        for ref in refs:
            toks_r = ref.split()
            lcs = lcs_len(toks_r, toks_c)
            precs.append(lcs / float(len(toks_c)) if toks_c else 0.0)
            recs.append(lcs / float(len(toks_r)) if toks_r else 0.0)
        pmax, rmax = max(precs), max(recs)
        if pmax != 0 and rmax != 0:
            b2 = ROUGE_BETA ** 2
            scores.append(((1 + b2) * pmax * rmax) / (rmax + b2 * pmax))
        else:
            scores.append(0.0)
    return sum(scores) / len(scores)


def cider(candidates, references):
    cooked_refs = [[precook(r)[1] for r in refs] for refs in references]
    cooked_tests = [precook(c)[1] for c in candidates]
    doc_freq = defaultdict(float)
    for refs in cooked_refs:
        for ngram in set(ng for ref in refs for ng in ref):
            doc_freq[ngram] += 1
    ref_len = math.log(float(len(cooked_refs)))

    def counts2vec(cnts):
        vec = [defaultdict(float) for _ in range(N)]
        norm = [0.0] * N
        length = 0
        for ngram, tf in cnts.items():
            df = math.log(max(1.0, doc_freq[ngram]))
            n = len(ngram) - 1
            vec[n][ngram] = float(tf) * (ref_len - df)
            norm[n] += vec[n][ngram] ** 2
            if n == 1:
                length += tf
        return vec, [math.sqrt(x) for x in norm], length

    def sim(vh, nh, lh, vr, nr, lr):
        delta = float(lh - lr)
        val = [0.0] * N
        for n in range(N):
            for ngram, w in vh[n].items():
                val[n] += min(w, vr[n][ngram]) * vr[n][ngram]
            if nh[n] != 0 and nr[n] != 0:
                val[n] /= nh[n] * nr[n]
            val[n] *= math.e ** (-(delta ** 2) / (2 * CIDER_SIGMA ** 2))
        return val

    scores = []
    for test, refs in zip(cooked_tests, cooked_refs):
        vec, norm, length = counts2vec(test)
        acc = [0.0] * N
        for ref in refs:
            vec_r, norm_r, length_r = counts2vec(ref)
            s = sim(vec, norm, length, vec_r, norm_r, length_r)
            acc = [a + b for a, b in zip(acc, s)]
        score_avg = sum(acc) / N / len(refs) * 10.0
        scores.append(score_avg)
    return sum(scores) / len(scores)


FIXTURE = {
    "i00": {
        "candidate": "a happy dog chases the red ball",
        "references": ["a happy dog chases the red ball"],
    },
    "i01": {
        "candidate": "the cat",
        "references": ["the cat sat"],
    },
    "i02": {
        "candidate": "purple rocks orbit slowly",
        "references": ["a man rides a wave", "a surfer in the ocean"],
    },
    "i03": {
        "candidate": "a scruffy terrier runs across wet grass",
        "references": [
            "a scruffy terrier sprints across wet grass",
            "a small dog runs on the lawn",
        ],
    },
    "i04": {
        "candidate": "two birds sit on a wire above the street",
        "references": ["two birds sit on a wire"],
    },
    "i05": {
        "candidate": "rain rain rain falls on the tin roof",
        "references": ["rain falls on the tin roof all night"],
    },
    "i06": {
        "candidate": "an old sailor mends a torn white sail",
        "references": [
            "an old sailor repairs a torn white sail",
            "a sailor mends his sail by the dock",
            "an elderly man fixes a sail",
        ],
    },
    "i07": {
        "candidate": "children laugh near the fountain",
        "references": ["children laugh and play near the stone fountain"],
    },
    "i08": {
        "candidate": "a lone cyclist climbs the steep mountain road at dawn",
        "references": ["a cyclist climbs a steep road"],
    },
    "i09": {
        "candidate": "fresh bread cools on the windowsill",
        "references": [
            "fresh bread cools on the windowsill",
            "a loaf of bread sits by the window",
        ],
    },
}


def main():
    item_ids = sorted(FIXTURE)
    cands = [FIXTURE[i]["candidate"] for i in item_ids]
    refs = [FIXTURE[i]["references"] for i in item_ids]

    # sanity: hand-checked single-reference ROUGE-L case
    hand = rouge_l(["the cat"], [["the cat sat"]])
    expect = ((1 + 1.44) * 1.0 * (2 / 3)) / ((2 / 3) + 1.44 * 1.0)
    assert abs(hand - expect) < 1e-12, hand

    bleus = bleu(cands, refs)
    scores = {
        "bleu1": bleus[0],
        "bleu2": bleus[1],
        "bleu3": bleus[2],
        "bleu4": bleus[3],
        "rougeL": rouge_l(cands, refs),
        "cider": cider(cands, refs),
    }
    with open("metrics_fixture.json", "w") as f:
        json.dump(
            {
                "candidates": dict(zip(item_ids, cands)),
                "references": dict(zip(item_ids, refs)),
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    with open("metrics_oracle.json", "w") as f:
        json.dump(scores, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps(scores, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
