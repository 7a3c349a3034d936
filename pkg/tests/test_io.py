import json
import struct

import numpy as np
import pytest
import torch
from conftest import make_ann

from tsphase import io
from tsphase.core import FeatureSequence, LabelSequence, ProbabilityStack
from tsphase.models import SpatialConfig, SpatialModel, TemporalConfig, TemporalModel


def test_feature_round_trip(tmp_path):
    seq = FeatureSequence("v1", np.random.default_rng(0).normal(size=(7, 3)))
    io.write_features(tmp_path / "v1.fseq", seq)
    assert io.read_features(tmp_path / "v1.fseq") == seq
    raw = (tmp_path / "v1.fseq").read_bytes()
    assert raw[:4] == b"FSEQ"
    assert struct.unpack_from("<HII", raw, 4) == (1, 7, 3)


def test_csv_features(tmp_path):
    (tmp_path / "a.csv").write_text("1,2\n3,4\n5,6\n")
    seq = io.read_features(tmp_path / "a.csv")
    assert seq.sequence_id == "a" and seq.frames.shape == (3, 2)


@pytest.mark.parametrize(
    "mutate, error",
    [
        (lambda b: b"XXXX" + b[4:], io.MalformedHeaderError),
        (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], io.VersionMismatchError),
        (lambda b: b[:-4], io.TruncatedPayloadError),
        (lambda b: b[:5], io.MalformedHeaderError),
        (lambda b: b + b"\0\0\0\0", io.MalformedHeaderError),
    ],
)
def test_bad_feature_files(tmp_path, mutate, error):
    path = tmp_path / "v.fseq"
    io.write_features(path, FeatureSequence("v", np.ones((4, 2))))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(error) as exc:
        io.read_features(path)
    assert exc.value.code == error.code


def test_nan_features_rejected(tmp_path):
    path = tmp_path / "v.fseq"
    frames = np.ones((4, 2))
    frames[2, 1] = np.nan
    io.write_features(path, FeatureSequence("v", frames))
    with pytest.raises(io.NonFiniteFeatureError) as exc:
        io.read_features(path)
    assert exc.value.code == "nan_in_features"


def test_stack_round_trip(tmp_path):
    p = np.random.default_rng(0).dirichlet(np.ones(3), size=(2, 5))
    stack = ProbabilityStack(p)
    io.write_stack(tmp_path / "s.pstk", stack)
    assert io.read_stack(tmp_path / "s.pstk") == stack


def test_annotation_round_trip(tmp_path):
    full = LabelSequence(np.repeat([1, 2, 3], [3, 3, 4]), "v")
    ann = make_ann(10, [(2, 1), (5, 2), (9, 3)], C=3, full=full, sid="v")
    io.write_annotation(tmp_path / "v.ann.json", ann)
    assert io.read_annotation(tmp_path / "v.ann.json") == ann


def test_invalid_annotation_lists_problems(tmp_path):
    doc = io.annotation_to_dict(make_ann(10, [(2, 1), (5, 2)], C=2))
    doc["timestamps"] = [{"frame": 5, "class": 1}, {"frame": 2, "class": 1}, {"frame": 40, "class": 2}]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(io.AnnotationValidationError) as exc:
        io.read_annotation(path)
    text = str(exc.value)
    assert "not increasing" in text and "share class" in text and "outside" in text
    assert exc.value.code == "invalid_annotation"


def test_malformed_json(tmp_path):
    path = tmp_path / "x.json"
    path.write_text("{not json")
    with pytest.raises(io.MalformedHeaderError):
        io.read_annotation(path)
    path.write_text(json.dumps({"format": "annotation", "version": 2}))
    with pytest.raises(io.VersionMismatchError):
        io.read_annotation(path)
    path.write_text(json.dumps({"format": "annotation", "version": 1}))
    with pytest.raises(io.MalformedHeaderError):
        io.read_annotation(path)


def test_labels_round_trip(tmp_path):
    labels = LabelSequence(np.array([0, 1, 1, 0, 2]), "v")
    io.write_labels(tmp_path / "l.json", labels)
    assert io.read_labels(tmp_path / "l.json") == labels


def test_report_has_provenance(tmp_path):
    doc = io.write_report(tmp_path / "r.json", {"acc": np.float64(0.5)}, {"tau": 0.1}, 3)
    back = io.read_report(tmp_path / "r.json")
    assert back["results"] == {"acc": 0.5}
    assert back["provenance"]["seed"] == 3
    assert isinstance(back["provenance"]["revision"], str)
    assert doc["config"] == {"tau": 0.1}


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    models = {
        "spatial": SpatialModel(SpatialConfig(5, 3, hidden=8)),
        "temporal": TemporalModel(TemporalConfig(8, 3, layers=2, channels=4, causal=True)),
    }
    path = tmp_path / "m.npz"
    io.write_checkpoint(path, models)
    loaded = io.read_checkpoint(path)
    x = np.random.default_rng(0).normal(size=(9, 5))
    emb = models["spatial"].embed(x)
    np.testing.assert_array_equal(loaded["spatial"].embed(x), emb)
    np.testing.assert_array_equal(
        loaded["temporal"].predict_proba(emb), models["temporal"].predict_proba(emb)
    )
    assert loaded["temporal"].config.causal


def test_truncated_checkpoint(tmp_path):
    torch.manual_seed(0)
    path = tmp_path / "m.npz"
    io.write_checkpoint(path, {"s": SpatialModel(SpatialConfig(5, 3))})
    path.write_bytes(path.read_bytes()[:200])
    with pytest.raises(io.TruncatedPayloadError):
        io.read_checkpoint(path)
