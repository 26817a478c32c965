"""Acceptance criteria, one test each.

Run alone with ``pytest tests/test_acceptance.py``; a PASS/FAIL line per
criterion is printed in the terminal summary.
"""

import math
import struct
import sys
import time

import numpy as np
import pytest
import yaml

from layersnr.checkpoint import (
    TensorRecord,
    decode_bfloat16,
    decode_float16,
    load_tensor,
    open_checkpoint,
    write_fixture,
)
from layersnr.cli import main as cli_main
from layersnr.scan import discover, dumps_report, read_report, scan
from layersnr.selection import select
from layersnr.spectral import analyze_matrix, singular_values
from layersnr.synth import GroupSpec, SpikedSpec, gen_mini_checkpoint, gen_noise, gen_spiked, gram_eigen_oracle


def _analyze(w, name="w"):
    return analyze_matrix(TensorRecord.from_array(name, w))


def _scan_file(path, batch_size=8):
    m = open_checkpoint(path)
    groups, skipped = discover(m)
    return scan(m, groups, batch_size, skipped=skipped, model_id=path.name)


def test_criterion_1_eigen_singular_oracle():
    """sqrt(eig(W^T W)) == singular_values(W) within 1e-6 relative, 100 matrices, dims <= 64, < 10 s."""
    started = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        dims = np.random.default_rng(seed).integers(1, 65, size=2)
        w = gen_noise(int(dims[0]), int(dims[1]), 1.0, seed)
        s = singular_values(w).singular_values
        oracle = np.sqrt(gram_eigen_oracle(w))
        worst = max(worst, float(np.max(np.abs(oracle - s) / s)))
    elapsed = time.perf_counter() - started
    assert worst <= 1e-6, f"worst relative error {worst:.3e}"
    assert elapsed < 10, f"took {elapsed:.1f} s"


def test_criterion_2_mp_edge():
    """Top eigenvalue of (1/n) W^T W for 2048x1024 unit noise within 5% of (1 + sqrt(m/n))^2, 5 seeds, < 60 s."""
    started = time.perf_counter()
    m, n, sigma = 2048, 1024, 1.0
    edge = sigma**2 * (1 + math.sqrt(m / n)) ** 2
    ratios = []
    for seed in range(5):
        w = gen_noise(m, n, sigma, seed)
        top = np.linalg.eigvalsh(w.T @ w / n)[-1]
        ratios.append(top / edge)
    elapsed = time.perf_counter() - started
    assert all(0.95 <= r <= 1.05 for r in ratios), ratios
    assert elapsed < 60, f"took {elapsed:.1f} s"


def test_criterion_3_noise_rejection():
    """Pure 512x512 noise: signal_count/512 <= 0.05 on 20 seeds; a spike >= 10 eps always counted."""
    fractions = []
    spike_counts = []
    for seed in range(20):
        noise = _analyze(gen_noise(512, 512, 1.0, seed))
        fractions.append(noise.signal_count / 512)
        amplitude = 10 * noise.bounds.epsilon
        spiked = _analyze(gen_spiked(SpikedSpec(512, 512, 1.0, (amplitude,), seed)))
        spike_counts.append(spiked.signal_count)
    spikes_ok = all(c >= 1 for c in spike_counts)
    noise_ok = max(fractions) <= 0.05
    assert spikes_ok, f"spike missed in some run: {spike_counts}"
    assert noise_ok, (
        f"pure-noise signal fraction {min(fractions):.3f}..{max(fractions):.3f} exceeds 0.05 "
        f"(spike detection passed in all 20 runs)"
    )


@pytest.fixture(scope="module")
def ramp_checkpoint(tmp_path_factory):
    """32 layers; layer i's q_proj carries one spike of amplitude 10 (i + 1)."""
    path = tmp_path_factory.mktemp("ramp") / "ramp.safetensors"
    groups = [
        GroupSpec("self_attn.q_proj", 64, 64, 0.02, lambda i: [10.0 * (i + 1)], seed=11),
        GroupSpec("mlp.down_proj", 64, 96, 0.02, lambda i: [5.0] * (1 + i % 5), seed=12),
    ]
    records = gen_mini_checkpoint(32, groups, path)
    return path, records


def test_criterion_4_snr_ordering(ramp_checkpoint, tmp_path):
    """Ranking within q_proj is descending layer index; -p 0.25 selects exactly the top 8 of 32."""
    path, _ = ramp_checkpoint
    out = tmp_path / "out"
    assert cli_main(["-q", "select", "--model", str(path), "--out", str(out), "-p", "0.25"]) == 0
    report = read_report(out / "snr_report.json")
    members = report.groups()["self_attn.q_proj"]
    plan = yaml.safe_load((out / "unfrozen_parameters.yaml").read_text())["unfrozen_parameters"]
    q_patterns = [p for p in plan if "q_proj" in p]

    by_snr = sorted(members, key=lambda m: -m[1].normalized_snr)
    top8 = {f"^model\\.layers\\.{layer}\\.self_attn\\.q_proj\\.weight$" for layer, _ in by_snr[:8]}
    selection_ok = len(q_patterns) == 8 and set(q_patterns) == top8
    ranking = [layer for layer, _ in members]
    ranking_ok = ranking == list(range(31, -1, -1))

    assert selection_ok, f"selected {sorted(q_patterns)}"
    assert ranking_ok, (
        "normalized-SNR ranking is not descending in layer index "
        f"(got {ranking}); top-8 selection itself was correct"
    )


def test_criterion_5_selection_scale_invariance(tmp_path):
    """Multiplying every weight by 7.3 leaves the selected set unchanged."""
    path = tmp_path / "base.safetensors"
    groups = [
        GroupSpec("self_attn.q_proj", 48, 48, 0.05, lambda i: [3.0] * (1 + i % 6), seed=21),
        GroupSpec("self_attn.v_proj", 48, 16, 0.05, lambda i: [1.0 + i], seed=22),
        GroupSpec("mlp.up_proj", 96, 48, 0.05, lambda i: [2.0] * (1 + (5 * i) % 7), seed=23),
    ]
    records = gen_mini_checkpoint(16, groups, path)
    scaled_path = tmp_path / "scaled.safetensors"
    write_fixture(
        [
            TensorRecord(r.name, r.shape, r.dtype, r.values * np.float32(7.3)) if len(r.shape) == 2 else r
            for r in records
        ],
        scaled_path,
    )
    base, scaled = _scan_file(path), _scan_file(scaled_path)
    for fraction in (0.25, 0.45, 0.5, 1.0):
        assert select(base, fraction).selected == select(scaled, fraction).selected, fraction


def test_criterion_6_format_exactness(tmp_path):
    """Bit-exact container round-trip, exhaustive 16-bit decoding, byte-deterministic report and plan."""
    rng = np.random.default_rng(6)
    records = [
        TensorRecord.from_array("a", rng.standard_normal((17, 9)), "float32"),
        TensorRecord.from_array("b", rng.standard_normal((5, 3, 2)), "float16"),
        TensorRecord.from_array("c", rng.standard_normal(33), "bfloat16"),
        TensorRecord.from_array("d", np.array([0.0, -0.0, 1e-40, -3.4e38], dtype=np.float32)),
    ]
    path = tmp_path / "rt.safetensors"
    write_fixture(records, path)
    m = open_checkpoint(path)
    for r in records:
        back = load_tensor(m, r.name)
        assert (back.shape, back.dtype) == (r.shape, r.dtype)
        assert back.values.tobytes() == r.values.tobytes()

    bits = np.arange(1 << 16, dtype="<u2").tobytes()
    half = decode_float16(bits)
    brain = decode_bfloat16(bits)
    for b in range(1 << 16):
        want_half = struct.unpack("<e", struct.pack("<H", b))[0]
        want_brain = struct.unpack("<f", struct.pack("<I", b << 16))[0]
        for got, want in ((half[b], want_half), (brain[b], want_brain)):
            if math.isnan(want):
                assert math.isnan(got), hex(b)
            else:
                assert got == want and math.copysign(1, got) == math.copysign(1, want), hex(b)

    fixture = tmp_path / "mini.safetensors"
    gen_mini_checkpoint(6, [GroupSpec("self_attn.k_proj", 20, 20, 0.1, lambda i: [2.0] * (1 + i % 3), seed=3)], fixture)
    outputs = []
    for run in ("one", "two"):
        out = tmp_path / run
        assert cli_main(["-q", "scan", "--model", str(fixture), "--out", str(out)]) == 0
        assert cli_main(["-q", "select", "--out", str(out), "-p", "0.5"]) == 0
        outputs.append(((out / "snr_report.json").read_bytes(), (out / "unfrozen_parameters.yaml").read_bytes()))
    assert outputs[0] == outputs[1]


def test_criterion_7_degenerate_handling(tmp_path):
    """Identity ranks first with inf SNR, zero matrix last with 0, 1-D excluded, corrupted tensor skipped."""
    path = tmp_path / "m.safetensors"
    nan_matrix = gen_noise(16, 16, 1.0, 9)
    nan_matrix[3, 4] = np.nan
    write_fixture(
        [
            TensorRecord.from_array("model.layers.0.mlp.gate_proj.weight", gen_noise(16, 16, 1.0, 1)),
            TensorRecord.from_array("model.layers.1.mlp.gate_proj.weight", np.zeros((16, 16))),
            TensorRecord.from_array("model.layers.2.mlp.gate_proj.weight", np.eye(16)),
            TensorRecord.from_array("model.layers.3.mlp.gate_proj.weight", gen_noise(16, 16, 1.0, 2)),
            TensorRecord.from_array("model.layers.4.mlp.gate_proj.weight", nan_matrix),
            TensorRecord.from_array("model.layers.0.post_attention_layernorm.weight", np.ones(16)),
            TensorRecord.from_array("model.norm.weight", np.ones(16)),
            # sorts last in the data section, so truncation damages only this one
            TensorRecord.from_array("zz.layers.9.mlp.gate_proj.weight", gen_noise(16, 16, 1.0, 3)),
        ],
        path,
    )
    path.write_bytes(path.read_bytes()[:-100])

    report = _scan_file(path)
    members = report.groups()["mlp.gate_proj"]
    first, last = members[0][1], members[-1][1]
    assert first.tensor_name.endswith("layers.2.mlp.gate_proj.weight") and first.normalized_snr == math.inf
    assert last.tensor_name.endswith("layers.1.mlp.gate_proj.weight") and last.normalized_snr == 0
    scanned = {r.tensor_name for _, _, r in report.scanned}
    assert not any("norm" in n for n in scanned) and not any("norm" in s.name for s in report.skipped)
    reasons = {s.name: s.reason for s in report.skipped}
    assert reasons["model.layers.4.mlp.gate_proj.weight"].startswith("non-finite")
    assert reasons["zz.layers.9.mlp.gate_proj.weight"].startswith("load-failed")
    assert len(scanned) == 4


def test_criterion_8_batch_invariance(ramp_checkpoint):
    """Reports for batch sizes 1, 4 and 16 are byte-identical."""
    path, _ = ramp_checkpoint
    texts = [dumps_report(_scan_file(path, b)) for b in (1, 4, 16)]
    assert texts[0] == texts[1] == texts[2]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
