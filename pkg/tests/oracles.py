"""Brute-force reference computations used to check the package.

Nothing here imports the code paths under test beyond plain data containers:
rankings are dense matrix scans, encodings are written directly from their
definitions on dense arrays.
"""

import numpy as np


def dense_crelu(x):
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([np.clip(x, 0, None), np.clip(-x, 0, None)], axis=-1)


def dense_top_z(w, z):
    """Zero all but the z largest entries per row; ties go to the lower column."""
    w = np.array(w, dtype=np.float64)
    if z >= w.shape[1]:
        return w
    out = np.zeros_like(w)
    for r in range(w.shape[0]):
        cols = sorted(range(w.shape[1]), key=lambda j: (-w[r, j], j))[:z]
        out[r, cols] = w[r, cols]
    return out


def dense_sq(x, scale, z):
    return dense_top_z(np.floor(scale * dense_crelu(x)), z)


def dense_dp(x, z):
    v = dense_crelu(x)
    n = v.shape[1]
    out = np.zeros_like(v)
    for r in range(v.shape[0]):
        cols = sorted(range(n), key=lambda j: (-v[r, j], j))
        for rank, j in enumerate(cols):
            if v[r, j] > 0:
                out[r, j] = n - rank
    return dense_top_z(out, z)


def cosine_matrix(q, c):
    q = np.asarray(q, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    qn = np.sqrt((q * q).sum(1))
    cn = np.sqrt((c * c).sum(1))
    dots = q @ c.T
    denom = qn[:, None] * cn[None, :]
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def rank_rows(scores):
    """Full ranking per row: descending score, ties by ascending column."""
    return np.argsort(-scores, axis=1, kind="stable")


def count_recall(ranked_ids, relevant, k):
    """ranked_ids: list of lists of ids; relevant: list of sets. Returns percentage."""
    hits = sum(1 for r, rel in zip(ranked_ids, relevant) if rel & set(r[:k]))
    return 100.0 * hits / len(ranked_ids)


def nearest_histogram(concepts, centroids):
    counts = np.zeros(len(centroids), dtype=int)
    for x in concepts:
        best, best_d = 0, None
        for k, c in enumerate(centroids):
            d = float(((np.asarray(x, float) - np.asarray(c, float)) ** 2).sum())
            if best_d is None or d < best_d:
                best, best_d = k, d
        counts[best] += 1
    return counts


def sparse_scan(items, q):
    """Exhaustive cosine over dict-of-dicts sparse vectors; returns [(id, score)] sorted."""
    qn = sum(w * w for w in q.values()) ** 0.5
    out = []
    for item_id, vec in items.items():
        dot = sum(w * vec[j] for j, w in sorted(q.items()) if j in vec)
        if dot == 0:
            continue
        vn = sum(w * w for w in vec.values()) ** 0.5
        out.append((item_id, dot / (qn * vn)))
    out.sort(key=lambda t: (-t[1], t[0]))
    return out


def pipeline_recall10(images, sentences, encode, rm_list=(), dense=None):
    """Recall@10 both directions for a dense encoder, optionally with re-ranking.

    Returns {("image_retrieval"|"sentence_retrieval", r_m or None): recall@10}.
    Relies on pack order being ascending id order.
    """
    img = images.global_matrix()
    sen = sentences.global_matrix()
    img_ids = images.ids
    sen_ids = sentences.ids
    groups = [s.group for s in sentences.items]
    by_image = {i: set() for i in img_ids}
    for s, g in zip(sen_ids, groups):
        by_image[g].add(s)
    out = {}
    for task, qmat, cmat, qids, cids, rel in [
        ("image_retrieval", sen, img, sen_ids, img_ids, [{g} for g in groups]),
        ("sentence_retrieval", img, sen, img_ids, sen_ids, [by_image[i] for i in img_ids]),
    ]:
        qe, ce = encode(qmat), encode(cmat)
        order = rank_rows(cosine_matrix(qe, ce))
        ranked = [[cids[j] for j in row] for row in order]
        out[(task, None)] = count_recall(ranked, rel, 10)
        exact = cosine_matrix(qmat, cmat)
        for r_m in rm_list:
            rr = []
            for qi, row in enumerate(order):
                cand = row[:r_m * 10]
                sc = exact[qi, cand]
                sub = sorted(range(len(cand)), key=lambda t: (-sc[t], cand[t]))
                rr.append([cids[cand[t]] for t in sub])
            out[(task, r_m)] = count_recall(rr, rel, 10)
    return out
