#!/usr/bin/env python3
"""Smoke test for the fusearch_py extension module.

Build the module, then run this script from anywhere:

    cargo build -p fusearch-python
    python3 python/smoke.py
"""

import math
import shutil
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def import_module():
    """Copies the built cdylib to an importable name and imports it."""
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    for profile in ("release", "debug"):
        built = ROOT / "target" / profile / "libfusearch_py.so"
        if not built.exists():
            continue
        shim = ROOT / "target" / "pyshim"
        shim.mkdir(exist_ok=True)
        dest = shim / f"fusearch_py{suffix}"
        if not dest.exists() or built.stat().st_mtime > dest.stat().st_mtime:
            shutil.copy2(built, dest)
        sys.path.insert(0, str(shim))
        import fusearch_py

        return fusearch_py
    sys.exit("module not built; run: cargo build -p fusearch-python")


fp = import_module()

corpus = fp.Corpus.generate(
    seed=7,
    n_queries_train=30,
    n_queries_val=10,
    n_queries_test=10,
    candidates_per_query=6,
    n_pool=500,
    embedding_dim=16,
    n_entities=24,
    n_events=8,
    vocab_size=96,
)
print(repr(corpus))
assert len(corpus) == 50 and corpus.n_candidates == 500
assert len(corpus.query_ids("test")) == 10

# Judgment scores must reproduce the relevance definition exactly.
for qid in corpus.query_ids()[:10]:
    for cid, score in corpus.judged(qid):
        assert corpus.relevance(qid, cid) == score, (qid, cid)

# Hand-checked ndcg value: grades 3,1,3,2,1 in rank order.
ranking = [(0, 5.0), (1, 4.0), (2, 3.0), (3, 2.0), (4, 1.0)]
judged = {0: 3, 1: 1, 2: 3, 3: 2, 4: 1}
assert abs(fp.ndcg(ranking, judged) - 0.9120) < 1e-4
assert fp.recall_at_k(ranking, judged, 1) == 0.5
assert fp.average_precision(ranking, judged) == (1 / 1 + 2 / 3) / 2
assert fp.recall_at_k(ranking, {0: 1}, 1) is None
assert fp.rank_pool([3, 1, 2], [0.5, 0.5, 2.0]) == [(2, 2.0), (1, 0.5), (3, 0.5)]

qid = corpus.query_ids("test")[0]
headlines = fp.HeadlineIndex.build(corpus)
assert len(headlines) == 500 and headlines.avg_doc_length > 0
hits = headlines.topk(corpus.query_tokens(qid), 10)
assert hits == sorted(hits, key=lambda e: (-e[1], e[0]))

images = fp.ImageIndex.build(corpus)
assert images.dim == 16
dense_hits = images.topk(corpus.query_embedding(qid), 5)
assert len(dense_hits) == 5
assert fp.recall_at_k(dense_hits, dict(corpus.judged(qid)), 5) is not None

encoder = fp.Encoder.train(corpus, epochs=2, batch_size=8, d_model=12, d_out=8, seed=0)
assert len(encoder.history) == 2 and encoder.temperature > 0
qvec = encoder.encode_query(corpus.query_tokens(qid))
assert len(qvec) == encoder.d_out == 8
cid = corpus.candidate_ids()[0]
cvec = encoder.encode_candidate(corpus.image_embedding(cid), corpus.headline_tokens(cid))
assert math.isfinite(sum(q * c for q, c in zip(qvec, cvec)))

encodings = encoder.encode_corpus(corpus)
print(repr(encodings))
w_image, tuned_value = fp.tune_weights(corpus, encodings)
assert 0.0 <= w_image <= 1.0 and 0.0 <= tuned_value <= 1.0

report = fp.evaluate(corpus, "bm25")
assert report["method"] == "bm25" and report["n_queries"] <= 10
assert fp.evaluate(corpus, "oracle")["ndcg"] == 1.0
fused = fp.evaluate(corpus, "score_fusion", encodings=encodings, w_image=w_image)
assert 0.0 <= fused["ndcg"] <= 1.0
try:
    fp.evaluate(corpus, "feature_fusion")
except ValueError:
    pass
else:
    sys.exit("feature_fusion without encodings should fail")

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)

    # Checkpoints round to f32, so reloaded encodings differ only in rounding.
    encoder.save(tmp / "encoder.ckpt")
    reloaded = fp.Encoder.load(tmp / "encoder.ckpt", corpus)
    rvec = reloaded.encode_query(corpus.query_tokens(qid))
    assert max(abs(a - b) for a, b in zip(qvec, rvec)) < 1e-3

    corpus.save(tmp / "corpus.jsonl", tmp / "corpus.emb")
    again = fp.Corpus.load(tmp / "corpus.jsonl", tmp / "corpus.emb")
    assert len(again) == len(corpus) and again.judged(qid) == corpus.judged(qid)

    conf = tmp / "pipeline.conf"
    conf.write_text(
        "\n".join(
            [
                f"out_dir = {tmp / 'run'}",
                "seed = 7",
                "n_queries_train = 30",
                "n_queries_val = 10",
                "n_queries_test = 10",
                "candidates_per_query = 6",
                "n_pool = 500",
                "embedding_dim = 16",
                "n_entities = 24",
                "n_events = 8",
                "vocab_size = 96",
                "epochs = 2",
                "batch_size = 8",
                "d_model = 12",
                "d_out = 8",
                "methods = bm25, oracle, feature_fusion",
                "protocols = distractor",
            ]
        )
    )
    reports = fp.run_pipeline(conf)
    assert len(reports) == 3
    for r in reports:
        print(f"{r['method']:16s} ndcg {r['ndcg']:.4f}  r@5 {r['r_at_5']:.4f}")
    assert next(r for r in reports if r["method"] == "oracle")["ndcg"] == 1.0

print("smoke OK")
