import numpy as np
import pytest

from unipar.data import DatasetSpec
from unipar.embeddings import ModalityKind
from unipar.encoder import (EncoderLayer, QueryMode, build_attribute_queries, encode_visual, fuse,
                            read_embedding_file, write_embedding_file)
from unipar.errors import ConfigurationError, DataError, ShapeError
from unipar.model import ModelConfig, ModelState
from unipar.numerics import Rng, Tensor, precision


def tiny_model(depth=3, seed=605):
    cfg = ModelConfig(dim=16, depth=depth, heads=2, patch_size=4, height=8, width=8, channels=3,
                      max_frames=2, dtype="float64")
    specs = [DatasetSpec("a", "a", ModalityKind.RGB, ["x", "y", "z"], 1, 8, 8, 3, 4, 0, [0.5] * 3, [0.5] * 3),
             DatasetSpec("b", "b", ModalityKind.EVENT, ["x", "y"], 2, 8, 8, 3, 4, 0, [0.5] * 2, [0.5] * 2)]
    return ModelState(cfg, specs, seed=seed)


def test_layer_preserves_shape():
    with precision("float64"):
        layer = EncoderLayer.create(32, 2, Rng(1))
        x = Tensor(Rng(2).normal((2, 130, 32)))
        assert layer(x).shape == (2, 130, 32)
        assert layer(Tensor(Rng(2).normal((130, 32)))).shape == (130, 32)


def test_layer_width_mismatch():
    layer = EncoderLayer.create(8, 2, Rng(1))
    with pytest.raises(ShapeError):
        layer(Tensor(np.zeros((1, 4, 16))))


def test_heads_must_divide_dim():
    with pytest.raises(ConfigurationError):
        EncoderLayer.create(10, 3, Rng(1))


def test_phased_encoder_needs_two_layers():
    with pytest.raises(ConfigurationError):
        encode_visual(Tensor(np.zeros((4, 8))), [])
    with pytest.raises(ConfigurationError):
        tiny_model(depth=1)


def test_visual_features_ignore_query_substitution():
    model = tiny_model()
    x = Rng(3).normal((2, 1, 3, 8, 8))
    reference = model.encode(x, "a").data.copy()
    rng = Rng(4)
    for _ in range(10):
        q = model.queries["a"].queries
        q.data[:] = rng.normal(q.shape, std=float(rng.uniform(1)[0] * 5))
        np.testing.assert_array_equal(model.encode(x, "a").data, reference)


def test_fusion_layer_is_unmasked():
    # visual positions attend to the queries in the final layer
    model = tiny_model()
    f_vis = model.encode(Rng(3).normal((1, 1, 3, 8, 8)), "a")
    q = model.queries["a"]
    vis1, _ = fuse(f_vis, q, model.fusion_layer)
    q.queries.data += 1.0
    vis2, _ = fuse(f_vis, q, model.fusion_layer)
    assert not np.array_equal(vis1.data, vis2.data)


def test_fused_sequence_splits_into_visual_and_attribute_parts():
    with precision("float64"):
        layer = EncoderLayer.create(8, 2, Rng(5))
        q = build_attribute_queries("a", 3, 8, "LEARNABLE", Rng(6))
        vis, attr = fuse(Tensor(Rng(7).normal((2, 4, 8))), q, layer)
        assert vis.shape == (2, 4, 8) and attr.shape == (2, 3, 8)
        vis1, attr1 = fuse(Tensor(Rng(7).normal((4, 8))), q, layer)
        assert vis1.shape == (4, 8) and attr1.shape == (3, 8)


def test_permuting_queries_permutes_attribute_outputs():
    with precision("float64"):
        layer = EncoderLayer.create(8, 2, Rng(5))
        q = build_attribute_queries("a", 5, 8, "LEARNABLE", Rng(6))
        q.queries.data += Rng(8).normal(q.queries.shape)
        f_vis = Tensor(Rng(7).normal((2, 4, 8)))
        _, base = fuse(f_vis, q, layer)
        perm = np.array([3, 0, 4, 1, 2])
        q.queries.data[:] = q.queries.data[perm]
        _, permuted = fuse(f_vis, q, layer)
        assert np.max(np.abs(permuted.data - base.data[:, perm])) <= 1e-9


def test_learnable_queries_are_small_and_trainable():
    q = build_attribute_queries("a", 400, 32, QueryMode.LEARNABLE, Rng(9))
    assert q.queries.requires_grad
    assert q.queries.shape == (400, 32)
    assert abs(np.std(q.queries.data) - 0.02) < 0.002


def test_none_mode_starts_from_zero():
    q = build_attribute_queries("a", 4, 8, "NONE", Rng(9))
    assert q.queries.requires_grad
    assert np.all(q.queries.data == 0)


def test_empty_query_set_rejected():
    with pytest.raises(ConfigurationError):
        build_attribute_queries("a", 0, 8, "LEARNABLE", Rng(9))


def test_external_file_same_width_is_frozen_verbatim(tmp_path):
    matrix = Rng(10).normal((3, 8)).astype(np.float32)
    path = tmp_path / "emb.bin"
    write_embedding_file(path, matrix)
    with precision("float64"):
        q = build_attribute_queries("a", 3, 8, "EXTERNAL_FILE", Rng(9), path)
    assert not q.queries.requires_grad
    assert q.projection is None
    np.testing.assert_array_equal(q.tokens().data, matrix.astype(np.float64))


def test_external_file_other_width_gets_trainable_projection(tmp_path):
    path = tmp_path / "emb.bin"
    write_embedding_file(path, Rng(10).normal((3, 12)))
    q = build_attribute_queries("a", 3, 8, "EXTERNAL_FILE", Rng(9), path)
    assert q.projection.requires_grad and not q.queries.requires_grad
    assert q.tokens().shape == (3, 8)


def test_external_file_row_mismatch(tmp_path):
    path = tmp_path / "emb.bin"
    write_embedding_file(path, np.zeros((4, 8)))
    with pytest.raises(DataError, match="4 embedding rows"):
        build_attribute_queries("a", 3, 8, "EXTERNAL_FILE", Rng(9), path)


def test_external_file_truncated(tmp_path):
    path = tmp_path / "emb.bin"
    write_embedding_file(path, np.zeros((4, 8)))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(DataError):
        read_embedding_file(path)


def test_external_mode_needs_a_file():
    with pytest.raises(ConfigurationError):
        build_attribute_queries("a", 3, 8, "EXTERNAL_FILE", Rng(9))


def test_model_attribute_features_match_query_count():
    model = tiny_model()
    assert model.attribute_features(np.zeros((2, 1, 3, 8, 8)), "a").shape == (2, 3, 16)
    assert model.attribute_features(np.zeros((2, 2, 3, 8, 8)), "b").shape == (2, 2, 16)
