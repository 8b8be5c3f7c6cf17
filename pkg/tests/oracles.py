"""Independent reference implementations used by the tests.

Written with plain loops and the ``math`` module so they share no code
with the package.
"""
import json
import math


def dense_attention(q_rows, k_rows, v_rows):
    n, m, c = len(q_rows), len(k_rows), len(q_rows[0])
    out, weights = [], []
    for a in range(n):
        logits = []
        for b in range(m):
            dot = 0.0
            for t in range(c):
                dot += q_rows[a][t] * k_rows[b][t]
            logits.append(dot / math.sqrt(c))
        top = max(logits)
        ex = [math.exp(z - top) for z in logits]
        total = sum(ex)
        w = [e / total for e in ex]
        weights.append(w)
        row = []
        for t in range(len(v_rows[0])):
            acc = 0.0
            for b in range(m):
                acc += w[b] * v_rows[b][t]
            row.append(acc)
        out.append(row)
    return out, weights


def matmul(x, w):
    return [[sum(x[a][t] * w[t][j] for t in range(len(w))) for j in range(len(w[0]))] for a in range(len(x))]


def brute_self_attention(x, wq, wk, wv, wo=None):
    out, _ = dense_attention(matmul(x, wq), matmul(x, wk), matmul(x, wv))
    return matmul(out, wo) if wo is not None else out


def brute_consistent_attention(batch, wq, wk, wv, picks, wo=None):
    """``picks[i]`` lists (source_image, token_index) pairs sampled for image i."""
    result = []
    for i, image in enumerate(batch):
        merged = [list(r) for r in image] + [list(batch[j][t]) for j, t in picks[i]]
        out, _ = dense_attention(matmul(image, wq), matmul(merged, wk), matmul(merged, wv))
        result.append(matmul(out, wo) if wo is not None else out)
    return result


def word_count_stats(jsonl_text):
    """One-off counting script: whitespace tokens of the body, no normalization
    beyond tag removal done by hand."""
    counts, poets, themes = [], set(), set()
    for line in jsonl_text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        words = 0
        for raw in rec["lines"]:
            cleaned, depth = [], 0
            for ch in raw:
                if ch == "<":
                    depth += 1
                    cleaned.append(" ")
                elif ch == ">" and depth:
                    depth -= 1
                elif not depth:
                    cleaned.append(ch)
            words += len("".join(cleaned).split())
        counts.append(words)
        poets.add(" ".join(rec["poet"].split()))
        themes.add(rec.get("theme", "").strip().lower())
    return {
        "poem_count": len(counts),
        "max_words": max(counts),
        "min_words": min(counts),
        "mean_words": sum(counts) / len(counts),
        "theme_count": len(themes),
        "distinct_poets": len(poets),
    }


def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)
