import json

import numpy as np
import pytest

from antkv import FormatError, read_tensor, write_tensor
from antkv.cli import main
from antkv.util import pack_indices, stream_rng, unpack_indices
from antkv import harness


def test_tensor_roundtrip(tmp_path, rng):
    X = rng.standard_normal((7, 6)).astype(np.float32)
    path = tmp_path / "x.antv"
    write_tensor(path, X, "K", positions=np.arange(7))
    arr, header = read_tensor(path)
    assert np.array_equal(arr, X)
    assert header["role"] == "K"
    assert header["positions"] == list(range(7))
    assert header["dtype"] == "f32"


def test_tensor_payload_size(tmp_path):
    path = tmp_path / "x.antv"
    write_tensor(path, np.zeros((16, 8), dtype=np.float32), "V")
    raw = path.read_bytes()
    magic_end = raw.index(b"\n") + 1
    header_end = raw.index(b"\n", magic_end) + 1
    assert len(raw) - header_end == 16 * 8 * 4


def test_tensor_rejects_bad_magic(tmp_path):
    path = tmp_path / "x.antv"
    write_tensor(path, np.zeros((2, 2), dtype=np.float32), "Q")
    raw = path.read_bytes()
    path.write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(FormatError):
        read_tensor(path)


def test_tensor_rejects_truncated_payload(tmp_path):
    path = tmp_path / "x.antv"
    write_tensor(path, np.zeros((4, 4), dtype=np.float32), "Q")
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        read_tensor(path)


def test_pack_unpack_roundtrip(rng):
    for bits in (1, 3, 8, 12):
        vals = rng.integers(2 ** bits, size=11)
        packed = pack_indices(vals, bits)
        assert len(packed) == (11 * bits + 7) // 8
        assert list(unpack_indices(packed, bits, 11)) == list(vals)


def test_stream_rng_named_streams_differ():
    a = stream_rng(7, "alpha").standard_normal(4)
    b = stream_rng(7, "beta").standard_normal(4)
    c = stream_rng(7, "alpha").standard_normal(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, c)


def test_gen_deterministic_bytes(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--seed", "3", "--n", "32", "--d", "16",
                     "--out", str(tmp_path / name)]) == 0
    for fname in ("q.antv", "k.antv", "v.antv", "gen_meta.json"):
        assert (tmp_path / "a" / fname).read_bytes() == \
            (tmp_path / "b" / fname).read_bytes()


def test_gen_heavy_hitter_plants_dominant_tokens():
    data = harness.generate_qkv(5, 128, 32, "heavy_hitter", planted=2)
    assert data["planted"] == [1, 3]
    k_norms = np.sqrt((data["K"].astype(np.float64) ** 2).sum(axis=1))
    assert set(np.argsort(-k_norms)[:2]) == {1, 3}


def test_gen_clustered_structure_compresses_well():
    data = harness.generate_qkv(5, 64, 32, "clustered", clusters=4)
    from antkv import VqConfig
    from antkv.vq import weighted_kmeans

    pts = data["K"].astype(np.float64).reshape(-1, 8)
    res = weighted_kmeans(pts, np.ones(len(pts)), 4, seed=0)
    # planted clusters: residual per sub-vector ~ 8 * 0.05^2, versus a
    # per-point energy of ~ 8 * 16 for the separated centers
    assert res.objective_trace[-1] / len(pts) < 0.1


def test_calibrate_rerun_identical(tmp_path):
    main(["gen", "--seed", "1", "--n", "48", "--d", "16",
          "--out", str(tmp_path / "s0")])
    main(["gen", "--seed", "2", "--n", "48", "--d", "16",
          "--out", str(tmp_path / "s1")])
    for name in ("cb_a", "cb_b"):
        assert main(["calibrate", "--inputs", str(tmp_path / "s0"),
                     str(tmp_path / "s1"), "--vq", "d4m16", "--seed", "9",
                     "--max-iter", "20", "--out", str(tmp_path / name)]) == 0
    for fname in ("codebook_k.json", "codebook_k.bin", "codebook_v.json",
                  "codebook_v.bin", "training_report.json"):
        assert (tmp_path / "cb_a" / fname).read_bytes() == \
            (tmp_path / "cb_b" / fname).read_bytes()


def test_eval_emits_schema_and_csv(tmp_path):
    main(["gen", "--seed", "4", "--n", "64", "--d", "16",
          "--structure", "heavy_hitter", "--out", str(tmp_path / "s")])
    main(["gen", "--seed", "8", "--n", "64", "--d", "16",
          "--out", str(tmp_path / "c")])
    main(["calibrate", "--inputs", str(tmp_path / "c"), "--vq", "d4m16",
          "--seed", "0", "--max-iter", "15", "--out", str(tmp_path / "cb")])
    out = tmp_path / "eval.json"
    csv_out = tmp_path / "eval.csv"
    assert main(["eval", "--inputs", str(tmp_path / "s"),
                 "--codebooks", str(tmp_path / "cb"),
                 "--anchors", "0.0", "0.05", "--trials", "3",
                 "--out", str(out), "--csv", str(csv_out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["schema_version"] == harness.EVAL_SCHEMA_VERSION
    assert len(doc["records"]) == 2
    for rec in doc["records"]:
        for key in ("vq", "bits_per_element", "anchor_fraction",
                    "attention_l1_error", "v_bound", "k_bound",
                    "first_order_residual", "ans_rank_agreement",
                    "random_control", "runtime_ms"):
            assert key in rec
        assert rec["attention_l1_error"] <= rec["v_bound"] + rec["k_bound"] \
            + rec["attention_l1_error"]  # all finite and comparable
    lines = csv_out.read_text().strip().splitlines()
    assert len(lines) == 3
    assert "attention_l1_error" in lines[0]


def test_rope_stats_zero_positions_pre_equals_post(tmp_path, rng):
    K = rng.standard_normal((32, 16)).astype(np.float32)
    path = tmp_path / "k.antv"
    write_tensor(path, K, "K", positions=np.zeros(32, dtype=np.int64))
    out = tmp_path / "stats.json"
    assert main(["rope-stats", "--k", str(path), "--vq", "d4m8",
                 "--seed", "1", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["pre_rope"] == doc["post_rope"]


def test_rope_stats_rotation_hurts_planted_clusters(tmp_path):
    data = harness.generate_qkv(3, 128, 32, "clustered", clusters=4)
    path = tmp_path / "k.antv"
    write_tensor(path, data["K"], "K", positions=data["positions"])
    out = tmp_path / "stats.json"
    assert main(["rope-stats", "--k", str(path), "--vq", "d8m4",
                 "--seed", "1", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["post_rope"]["mean_reconstruction_error"] > \
        doc["pre_rope"]["mean_reconstruction_error"]


def test_anchor_sweep_record_count(tmp_path):
    out = tmp_path / "sweep.json"
    assert main(["anchor-sweep", "--fractions", "0,0.05",
                 "--seeds", "0,1", "--vq", "d4m16", "--n", "48",
                 "--d", "16", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["records"]) == 4
    assert set(doc["per_fraction_mean_error"]) == {"0.0", "0.05"}


def test_cli_exit_codes(tmp_path):
    # usage error: missing input directory
    assert main(["eval", "--inputs", str(tmp_path / "missing"),
                 "--codebooks", str(tmp_path / "none")]) == 2
    # format error: corrupt tensor file
    bad = tmp_path / "bad"
    bad.mkdir()
    for name in ("q.antv", "k.antv", "v.antv"):
        (bad / name).write_bytes(b"garbage")
    assert main(["eval", "--inputs", str(bad),
                 "--codebooks", str(tmp_path / "none")]) == 3


def test_cli_rejects_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
