import json

import numpy as np
import pytest

from conceptseg import concepts as cc
from conceptseg import numerics as nm
from conceptseg.errors import ShapeError, ValidationError


def write_cm(tmp_path, payload, name="cm.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def orthonormal_file(tmp_path):
    return write_cm(tmp_path, {
        "dim": 4, "normalized": True,
        "concepts": [
            {"name": "a", "text": "ta", "vector": [1, 0, 0, 0]},
            {"name": "b", "text": "tb", "vector": [0, 1, 0, 0]},
            {"name": "c", "text": "tc", "vector": [0, 0, 1, 0]},
        ],
    })


class TestLoader:
    def test_loads_orthonormal(self, tmp_path):
        cm = cc.load_concept_matrix(orthonormal_file(tmp_path))
        assert cm.M == 3 and cm.dim == 4
        assert cm.names == ["a", "b", "c"]

    def test_dimension_mismatch_names_concept(self, tmp_path):
        path = write_cm(tmp_path, {
            "dim": 4, "normalized": True,
            "concepts": [
                {"name": "a", "text": "", "vector": [1, 0, 0, 0]},
                {"name": "b", "text": "", "vector": [0, 1, 0]},
            ],
        })
        with pytest.raises(ValidationError, match="concept #2"):
            cc.load_concept_matrix(path)

    def test_duplicate_name_rejected(self, tmp_path):
        path = write_cm(tmp_path, {
            "dim": 2, "normalized": True,
            "concepts": [
                {"name": "a", "text": "", "vector": [1, 0]},
                {"name": "a", "text": "", "vector": [0, 1]},
            ],
        })
        with pytest.raises(ValidationError, match="duplicate"):
            cc.load_concept_matrix(path)

    def test_nonfinite_rejected(self, tmp_path):
        path = write_cm(tmp_path, {
            "dim": 2, "normalized": True,
            "concepts": [{"name": "a", "text": "", "vector": [1, float("inf")]}],
        })
        with pytest.raises(ValidationError, match="non-finite"):
            cc.load_concept_matrix(path)

    def test_missing_field_rejected(self, tmp_path):
        path = write_cm(tmp_path, {"dim": 2, "concepts": []})
        with pytest.raises(ValidationError, match="normalized"):
            cc.load_concept_matrix(path)

    def test_unnormalized_rows_are_normalized_on_load(self, tmp_path):
        path = write_cm(tmp_path, {
            "dim": 2, "normalized": False,
            "concepts": [{"name": "a", "text": "", "vector": [3.0, 4.0]}],
        })
        cm = cc.load_concept_matrix(path)
        assert cm.normalized
        assert np.allclose(cm.concepts[0].vector, [0.6, 0.8])

    def test_round_trip_bitwise(self, tmp_path):
        rng = nm.Rng(11)
        raw = rng.normal((5, 7))
        raw = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        cm = cc.ConceptMatrix(
            dim=7,
            concepts=[cc.Concept(f"c{i}", f"text {i}", raw[i]) for i in range(5)])
        path = tmp_path / "rt.json"
        cc.save_concept_matrix(cm, path)
        loaded = cc.load_concept_matrix(path)
        for orig, back in zip(cm.concepts, loaded.concepts):
            assert np.array_equal(orig.vector, back.vector)


class TestProjection:
    def test_identity_projection(self, tmp_path):
        cm = cc.load_concept_matrix(orthonormal_file(tmp_path))
        proj = cc.ConceptProjection((0, "attn"), nm.Tensor(np.eye(4)))
        out = cc.project_concepts(cm, proj)
        assert np.array_equal(out.data, cm.matrix())

    def test_zero_projection(self, tmp_path):
        cm = cc.load_concept_matrix(orthonormal_file(tmp_path))
        proj = cc.ConceptProjection((0, "attn"), nm.Tensor(np.zeros((4, 6))))
        assert np.array_equal(cc.project_concepts(cm, proj).data, np.zeros((3, 6)))

    def test_random_matches_matmul_oracle(self, tmp_path):
        from tests.test_numerics import naive_matmul

        cm = cc.load_concept_matrix(orthonormal_file(tmp_path))
        w = nm.Rng(2).normal((4, 5))
        proj = cc.ConceptProjection((0, "attn"), nm.Tensor(w))
        assert np.array_equal(cc.project_concepts(cm, proj).data,
                              naive_matmul(cm.matrix(), w))

    def test_dim_mismatch(self, tmp_path):
        cm = cc.load_concept_matrix(orthonormal_file(tmp_path))
        proj = cc.ConceptProjection((0, "attn"), nm.Tensor(np.zeros((3, 6))))
        with pytest.raises(ShapeError):
            cc.project_concepts(cm, proj)


class TestSimilarity:
    def test_one_hot_match(self):
        x = nm.Tensor(np.eye(3)[:1])           # one token, one-hot dim 3
        c = nm.Tensor(np.eye(3))               # three one-hot concepts
        s, s_bar = cc.concept_similarity(x, c)
        assert np.array_equal(s.data, [[1.0, 0.0, 0.0]])
        assert np.array_equal(s_bar.data, [1.0, 0.0, 0.0])

    def test_identical_tokens_mean_equals_row(self):
        rng = nm.Rng(4)
        token = rng.normal((1, 8))
        x = nm.Tensor(np.repeat(token, 5, axis=0))
        c = nm.Tensor(rng.normal((3, 8)))
        s, s_bar = cc.concept_similarity(x, c)
        assert np.allclose(s_bar.data, s.data[0], atol=1e-12)

    def test_mean_matches_direct_oracle(self):
        rng = nm.Rng(5)
        x, c = rng.normal((5, 8)), rng.normal((3, 8))
        _, s_bar = cc.concept_similarity(nm.Tensor(x), nm.Tensor(c))
        direct = np.array([np.mean([np.dot(x[t], c[m]) for t in range(5)])
                           for m in range(3)])
        assert np.allclose(s_bar.data, direct, atol=1e-12)

    def test_bilinear_scaling(self):
        rng = nm.Rng(6)
        x, c = rng.normal((4, 6)), rng.normal((2, 6))
        s1f, s1 = cc.concept_similarity(nm.Tensor(x), nm.Tensor(c))
        # power-of-two scale: exact in floating point
        s2f, s2 = cc.concept_similarity(nm.Tensor(2.0 * x), nm.Tensor(c))
        assert np.array_equal(s2.data, 2.0 * s1.data)
        assert np.array_equal(s2f.data, 2.0 * s1f.data)

    def test_zero_tokens_rejected(self):
        with pytest.raises(ShapeError):
            cc.concept_similarity(nm.Tensor(np.zeros((0, 4))),
                                  nm.Tensor(np.zeros((2, 4))))


class TestSynth:
    def profiles(self, m=4):
        return [cc.TaskProfile("t1", {f"c{i}": 1.0 for i in range(m)})]

    def test_near_orthogonal_rows(self):
        cm = cc.synth_concepts(self.profiles(4), d_t=16, seed=0)
        g = cm.matrix() @ cm.matrix().T
        off = g - np.diag(np.diag(g))
        assert np.abs(off).max() < 0.2

    def test_single_concept_unit_norm(self):
        cm = cc.synth_concepts([cc.TaskProfile("t", {"only": 1.0})], d_t=8, seed=3)
        assert cm.M == 1
        assert abs(np.linalg.norm(cm.concepts[0].vector) - 1.0) <= 1e-12

    def test_deterministic(self):
        a = cc.synth_concepts(self.profiles(), d_t=16, seed=9)
        b = cc.synth_concepts(self.profiles(), d_t=16, seed=9)
        assert np.array_equal(a.matrix(), b.matrix())

    def test_d_t_validated(self):
        with pytest.raises(Exception):
            cc.synth_concepts(self.profiles(), d_t=0, seed=0)

    def test_row_order_is_first_appearance(self):
        profiles = [cc.TaskProfile("t1", {"z": 1.0, "a": 1.0}),
                    cc.TaskProfile("t2", {"m": 1.0, "z": 0.5})]
        cm = cc.synth_concepts(profiles, d_t=8, seed=0)
        assert cm.names == ["z", "a", "m"]
