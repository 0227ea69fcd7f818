import json
import struct

import numpy as np
import pytest

from conftest import random_multiplex
from mplexattn.embed import (
    TABLE_MAGIC,
    Node2VecConfig,
    Node2VecEmbedder,
    build_edge_views,
    edge_view_array,
    embed_layer,
    embed_multiplex,
    generate_walks,
    load_embeddings,
    save_embeddings,
    train_skipgram,
    transition_probs,
)
from mplexattn.graph import FeatureGraph, LayerGraph, LeakageError, MultiplexGraph

SMALL = Node2VecConfig(d_node=8, walk_length=10, walks_per_node=4, window=3, epochs=3, seed=3)


def test_config_validation():
    for bad in (dict(d_node=1), dict(p=0.0), dict(q=-1.0), dict(walk_length=1)):
        with pytest.raises(ValueError):
            Node2VecConfig(**bad)


def test_star_center_transitions_are_uniform():
    k = 6
    star = LayerGraph.from_pairs(k + 1, [(0, i) for i in range(1, k + 1)])
    assert np.allclose(transition_probs(star, None, 0, 1.0, 1.0), 1 / k)
    assert np.allclose(transition_probs(star, 3, 0, 1.0, 1.0), 1 / k)


def test_path_return_probability_hand_value():
    path = LayerGraph.from_pairs(3, [(0, 1), (1, 2)])
    probs = transition_probs(path, 0, 1, p=10.0, q=1.0)
    assert probs[0] == pytest.approx((1 / 10) / (1 / 10 + 1), abs=1e-15)
    assert probs[0] == pytest.approx(0.0909, abs=1e-4)


def test_triangle_neighbour_weight_is_one():
    # at 1 coming from 0: 0 is return (1/p), 2 is a neighbour of 0 (weight 1), 3 is outward (1/q)
    g = LayerGraph.from_pairs(4, [(0, 1), (1, 2), (0, 2), (1, 3)])
    probs = transition_probs(g, 0, 1, p=2.0, q=4.0)
    w = np.array([0.5, 1.0, 0.25])
    assert np.allclose(probs, w / w.sum(), atol=1e-15)


def test_walks_follow_edges_and_distributions_are_normalised():
    g = random_multiplex(np.random.default_rng(2), 15, 2, 0.25).layers[0]
    record = []
    cfg = Node2VecConfig(walk_length=12, walks_per_node=3, p=0.5, q=2.0, seed=9)
    walks = generate_walks(g, cfg, record=record)
    isolated = {n for n in range(15) if not g.adjacency[n]}
    assert len(walks) == cfg.walks_per_node * (15 - len(isolated))
    assert {w[0] for w in walks} == set(range(15)) - isolated
    for walk in walks:
        assert len(walk) == cfg.walk_length
        for a, b in zip(walk, walk[1:]):
            assert (min(a, b), max(a, b)) in g.edges
    assert len(record) == len(walks) * (cfg.walk_length - 1)
    for dist in record:
        assert abs(dist.sum() - 1.0) <= 1e-9 and np.all(dist >= 0)


def test_edgeless_layer_gives_empty_corpus_and_zero_table():
    empty = LayerGraph.from_pairs(5, [])
    assert generate_walks(empty, SMALL) == []
    table, curve = train_skipgram([], 5, SMALL)
    assert table.shape == (5, SMALL.d_node) and not table.any() and curve == []


def test_walks_are_deterministic_per_seed():
    g = random_multiplex(np.random.default_rng(5), 12, 2, 0.4).layers[1]
    assert generate_walks(g, SMALL, seed=[1, 2]) == generate_walks(g, SMALL, seed=[1, 2])
    assert generate_walks(g, SMALL, seed=[1, 2]) != generate_walks(g, SMALL, seed=[1, 3])


def _two_cliques(k):
    edges = [(u, v) for block in (range(k), range(k, 2 * k)) for u in block for v in block if u < v]
    return LayerGraph.from_pairs(2 * k + 1, edges)  # last node isolated


def _cos(a, b):
    return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))


def test_skipgram_separates_disconnected_cliques():
    k = 6
    layer = _two_cliques(k)
    cfg = Node2VecConfig(d_node=16, walk_length=20, walks_per_node=10, epochs=5, seed=1)
    table, curve = embed_layer(layer, cfg, 0)
    assert table.shape == (2 * k + 1, 16)
    intra = [_cos(table[a], table[b]) for block in (range(k), range(k, 2 * k)) for a in block for b in block if a < b]
    inter = [_cos(table[a], table[b]) for a in range(k) for b in range(k, 2 * k)]
    assert np.mean(intra) > np.mean(inter)
    assert curve[-1] < curve[0]
    assert not table[2 * k].any()


def test_skipgram_is_bitwise_deterministic():
    layer = _two_cliques(4)
    a, _ = embed_layer(layer, SMALL, 2)
    b, _ = embed_layer(layer, SMALL, 2)
    assert a.tobytes() == b.tobytes()
    c, _ = embed_layer(layer, SMALL, 3)
    assert a.tobytes() != c.tobytes()


def test_embed_multiplex_respects_feature_guard():
    g = random_multiplex(np.random.default_rng(0), 10, 3, 0.4)
    with pytest.raises(LeakageError):
        embed_multiplex(FeatureGraph(g, 1, None), SMALL)
    allowed = sorted(g.layers[1].edges)[:2]
    tables = embed_multiplex(FeatureGraph(g, 1, allowed), SMALL)
    assert tables.shape == (3, 10, SMALL.d_node)
    touched = {x for e in allowed for x in e}
    for n in range(10):
        assert tables[1, n].any() == (n in touched)


def test_edge_views_shape_and_oracle(rng):
    tables = rng.normal(size=(3, 7, 64))
    seq = build_edge_views((5, 2), tables)
    assert seq.pair == (2, 5) and seq.views.shape == (3, 128) and seq.d_model == 128
    for m in range(3):
        assert np.array_equal(seq.views[m], np.concatenate([tables[m, 2], tables[m, 5]]))
    pairs = rng.integers(0, 7, size=(20, 2))
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    arr = edge_view_array(pairs, tables)
    for i, (u, v) in enumerate(pairs):
        assert np.array_equal(arr[i], build_edge_views((u, v), tables).views)


def test_edge_view_of_isolated_node_has_zero_half(rng):
    tables = rng.normal(size=(3, 5, 4))
    tables[1, 4] = 0.0
    views = build_edge_views((1, 4), tables).views
    assert not views[1, 4:].any() and views[1, :4].any()


def test_edge_views_reject_mismatched_tables():
    with pytest.raises(ValueError):
        build_edge_views((0, 1), [np.zeros((4, 3)), np.zeros((4, 5))])


def test_embedding_file_format(tmp_path, rng):
    cfg = Node2VecConfig(d_node=64)
    tables = rng.normal(size=(5, 9, 64))
    path = tmp_path / "t.n2v"
    save_embeddings(path, tables, cfg, {"target_layer": 2})
    raw = path.read_bytes()
    assert raw[:4] == TABLE_MAGIC
    assert struct.unpack("<IIII", raw[4:20]) == (1, 9, 64, 5)
    row_bytes = 64 * 4
    assert len(raw) == 20 + 5 * 9 * row_bytes
    loaded, sidecar = load_embeddings(path)
    assert loaded.shape == (5, 9, 64)
    assert np.array_equal(loaded, tables.astype(np.float32).astype(np.float64))
    assert sidecar["fingerprint"] == cfg.fingerprint() and sidecar["target_layer"] == 2
    assert json.loads((tmp_path / "t.n2v.json").read_text())["config"]["d_node"] == 64


def test_fingerprint_tracks_p_and_q():
    base = Node2VecConfig()
    assert base.fingerprint() == Node2VecConfig().fingerprint()
    assert base.fingerprint() != Node2VecConfig(p=2.0).fingerprint()
    assert base.fingerprint() != Node2VecConfig(q=0.5).fingerprint()


def test_embedder_estimator():
    g = MultiplexGraph.from_edges(6, [[(0, 1), (1, 2), (2, 3)], [(3, 4), (4, 5), (0, 5)]])
    emb = Node2VecEmbedder(g, d_node=4, walk_length=6, walks_per_node=2, epochs=1)
    assert emb.get_params()["d_node"] == 4
    X = emb.fit_transform(np.array([[0, 1], [4, 3]]))
    assert X.shape == (2, 2 * 2 * 4)
    assert np.array_equal(X[1].reshape(2, 8), edge_view_array([[3, 4]], emb.tables_)[0])
