"""Packing-noise margins and the compute/communication trade-off.

Left: measured slot residuals against the correctness bound 1/(2p).
Right: how the extraction level trades upload volume for packing time,
plus the modeled end-to-end latency across network speeds.
"""

from sfhr.bench import BANDWIDTHS_MB_S, bench_inference, e2e_projection
from sfhr.model import load_builtin_toy
from sfhr.params import preset_for_bits
from sfhr.testing import packed_noise_audit

print("packing-noise audit at b=8 (bound is |noise| * 2p < 1):")
for gamma in (0, 1, 2):
    audit = packed_noise_audit(preset_for_bits(8, gamma), n_coeffs=2000, seed=3)
    print(f"  gamma={gamma}: {len(audit.residuals)} coefficients, "
          f"max |noise|*2p = {audit.scaled_max:.4f}, violations = {audit.violations}")

print("\nphase timings and volumes on the toy model (b=8):")
model = load_builtin_toy()
for gamma in (0, 1, 2):
    rows = bench_inference(model, "toy_cnn", 8, gamma, n_inputs=2)
    pack = next(r for r in rows if r.phase == "pack")
    print(f"  gamma={gamma}: pack {pack.seconds:.3f}s, "
          f"up {pack.bytes_up} B, down {pack.bytes_down} B")
    secs = sum(r.seconds for r in rows)
    proj = e2e_projection(secs, pack.bytes_up + pack.bytes_down,
                          bandwidths_mb_s=BANDWIDTHS_MB_S[:4])
    print("    modeled e2e:", "  ".join(f"{bw} MB/s: {s:.2f}s" for bw, s in proj))
