"""Acceptance gate: one test per criterion, each printing a pass line.

Criteria 1-6 and 9 are property-based and run in seconds to minutes.
Criteria 7-8 share one desk-scale experiment: both training stages on an
advecting-blobs corpus (1 x 512 x 64 x 64) behind a session fixture, then
trend checks on a held-out tail.  Set LATENTZIP_ACCEPT_SCALE to scale the
training budget (default 1.0).
"""

import copy
import math
import os
import shutil
import subprocess
import sys
import time
from dataclasses import dataclass

import numpy as np
import pytest
import torch

from latentzip.checkpoints import save_basis, save_codec, save_denoiser
from latentzip.codec import RDTrainConfig, train_stage1
from latentzip.container import read_container, write_container
from latentzip.diffusion import (Denoiser, DenoiserConfig, build_schedule,
                                 finetune_reduced_steps, forward_sample, sample_conditioned,
                                 subsample_steps, train_denoiser, training_step)
from latentzip.entropy import TableSet, discretized_gaussian_pmf, gaussian_table_set
from latentzip.errorbound import (apply_correction, decode_payload, encode_payload, fit_basis,
                                  project, select_and_quantize)
from latentzip.errors import ContainerError
from latentzip.fields import ScalarField, compression_ratio, nrmse
from latentzip.partition import Strategy, make_partition
from latentzip.pipeline import (Models, PipelineConfig, compress, decompress,
                                decompress_keyframe_hold, encode_all_latents,
                                fit_residual_basis, latent_window_batch_fn, nrmse_per_frame)
from latentzip.rawio import write_raw
from latentzip.synthetic import synth_data

pytestmark = pytest.mark.slow

SCALE = float(os.environ.get("LATENTZIP_ACCEPT_SCALE", "1.0"))


def _passed(criterion: str, detail: str):
    print(f"\n[PASS] {criterion}: {detail}")


# --------------------------------------------------------------------------
# criterion 1: entropy-coder losslessness, 1000 randomized round trips < 60 s
# --------------------------------------------------------------------------

def test_criterion_1_entropy_coder_losslessness():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    total_symbols = 0
    for case in range(1000):
        n_tables = int(rng.integers(1, 6))
        tables = []
        for _ in range(n_tables):
            lo = int(rng.integers(-400, 200))
            hi = lo + int(rng.integers(1, 260))
            mu = float(rng.uniform(lo - 10, hi + 10))
            sigma = float(10.0 ** rng.uniform(-1.5, 1.5))
            tables.append(discretized_gaussian_pmf(mu, max(sigma, 0.011), lo, hi))
        ts = TableSet(tables)
        n = int(rng.integers(0, 100_001))
        ids = rng.integers(0, n_tables, n)
        symbols = np.empty(n, dtype=np.int64)
        for t in range(n_tables):
            mask = ids == t
            k = int(mask.sum())
            if k:
                tab = tables[t]
                symbols[mask] = rng.choice(tab.width, size=k, p=tab.pmf()) + tab.sym_min
        code = ts.encode(symbols, ids)
        decoded = ts.decode(code, n, ids)
        assert np.array_equal(decoded, symbols), f"round trip failed in case {case}"
        total_symbols += n
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"took {elapsed:.1f}s (budget 60s)"
    _passed("1 entropy-coder losslessness",
            f"1000 cases, {total_symbols} symbols, exact, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# criterion 2: rate-model fidelity within 1% + 64 bits on 1e5 symbols
# --------------------------------------------------------------------------

def test_criterion_2_rate_model_fidelity():
    rng = np.random.default_rng(7)
    n = 100_000
    mu = rng.normal(scale=2.0, size=64)
    sigma = 0.3 + 2.5 * rng.random(64)
    tables = gaussian_table_set(mu, sigma, -40, 40)
    ids = rng.integers(0, 64, n)
    symbols = np.empty(n, dtype=np.int64)
    for t in range(64):
        mask = ids == t
        k = int(mask.sum())
        if k:
            base = tables.tbl_base[t]
            p = np.diff(tables.cums[base:base + 82].astype(np.float64)) / 65536.0
            symbols[mask] = rng.choice(81, size=k, p=p) - 40
    estimate = tables.bits(symbols, ids)
    actual = len(tables.encode(symbols, ids)) * 8
    slack = estimate * 0.01 + 64
    assert abs(actual - estimate) <= slack, f"|{actual} - {estimate:.0f}| > {slack:.0f}"
    _passed("2 rate-model fidelity",
            f"coded {actual} bits vs estimate {estimate:.0f} bits "
            f"(gap {actual - estimate:+.0f}, allowed +/-{slack:.0f})")


# --------------------------------------------------------------------------
# criterion 3: forward-process moments at t in {T/4, T/2, T} within 4 SE
# --------------------------------------------------------------------------

def test_criterion_3_forward_process_moments():
    sched = build_schedule(200)
    rng = np.random.default_rng(11)
    n = 100_000
    y0 = 0.37
    details = []
    for t in (50, 100, 200):
        eps = rng.standard_normal(n)
        out = forward_sample(np.full(n, y0), t, eps, sched)
        a = sched.alpha_bar(t)
        want_mean = math.sqrt(a) * y0
        want_var = 1.0 - a
        se_mean = math.sqrt(want_var / n)
        se_var = want_var * math.sqrt(2.0 / (n - 1))
        dm = abs(out.mean() - want_mean)
        dv = abs(out.var() - want_var)
        assert dm < 4 * se_mean, f"t={t}: mean off by {dm} (4SE={4*se_mean})"
        assert dv < 4 * se_var, f"t={t}: var off by {dv} (4SE={4*se_var})"
        details.append(f"t={t}: |dmean|={dm/se_mean:.2f}SE |dvar|={dv/se_var:.2f}SE")
    _passed("3 forward-process moments", "; ".join(details))


# --------------------------------------------------------------------------
# criterion 4: conditioning fixedness + loss masking, 100 randomized runs
# --------------------------------------------------------------------------

def test_criterion_4_conditioning_fixedness():
    rng = np.random.default_rng(13)
    sched = build_schedule(60)
    for run in range(100):
        torch.manual_seed(run)
        n = int(rng.integers(3, 12))
        k = int(rng.integers(1, n))
        cond_set = tuple(sorted(rng.choice(np.arange(1, n + 1), size=k, replace=False)))
        from latentzip.partition import IndexPartition

        partition = IndexPartition(n_frames=n, cond=cond_set)
        c, h, w = 2, 4, 4
        den = Denoiser(DenoiserConfig(latent_channels=c, width=16, blocks=1, heads=2))
        den.eval()
        cond = torch.randn(k, c, h, w, generator=torch.Generator().manual_seed(run))
        steps = subsample_steps(60, int(rng.integers(1, 13)))
        out = sample_conditioned(cond, partition, den, sched, steps,
                                 torch.Generator().manual_seed(run + 1))
        assert torch.equal(out[torch.from_numpy(partition.cond_idx0)], cond), \
            f"run {run}: conditioning frames not bit-identical"

    # loss invariance to perturbing conditioning-indexed denoiser outputs
    partition = make_partition(8, Strategy(kind="interpolation", interval=7))
    frames = torch.rand(2, 8, 2, 4, 4) * 2 - 1
    cond_idx = torch.from_numpy(partition.cond_idx0)

    class Perturbed(torch.nn.Module):
        def __init__(self, bump):
            super().__init__()
            self.bump = bump

        def forward(self, y, t):
            out = torch.zeros_like(y)
            out[:, cond_idx] = self.bump
            return out

    losses = {bump: float(training_step(frames, partition, Perturbed(bump), sched,
                                        torch.Generator().manual_seed(5)))
              for bump in (0.0, 1e6)}
    assert losses[0.0] == losses[1e6], "loss depends on conditioning outputs"
    _passed("4 conditioning fixedness",
            "100 sampling runs bit-exact at conditioning indices; "
            "training loss invariant to conditioning-output perturbation")


# --------------------------------------------------------------------------
# criterion 5: hard error-bound guarantee, 10000 randomized (block, tau)
# --------------------------------------------------------------------------

def test_criterion_5_error_bound_guarantee():
    rng = np.random.default_rng(17)
    failures = 0
    fallbacks = 0
    for case in range(10_000):
        d = int(rng.integers(4, 40))
        b = int(rng.integers(1, min(d, 16) + 1))
        basis = fit_basis(rng.normal(size=(b + int(rng.integers(1, 30)), d)), b)
        scale = 10.0 ** rng.integers(-3, 4)
        target = rng.normal(size=d) * scale
        if case % 3 == 0:
            # adversarial: residual orthogonal to the basis span
            full = np.linalg.qr(np.hstack([basis.matrix, rng.normal(size=(d, d - b))]))[0]
            recon = target - scale * full[:, b + int(rng.integers(d - b))] \
                if d > b else target - rng.normal(size=d) * scale
        else:
            recon = target - rng.normal(size=d) * scale * 10.0 ** rng.integers(-2, 2)
        tau = float(10.0 ** rng.uniform(-8, 3)) * scale
        payload = decode_payload(encode_payload(
            select_and_quantize(target, recon, basis, tau)))
        corrected = apply_correction(recon, payload, basis)
        fallbacks += payload.is_fallback
        if np.linalg.norm(target - corrected) > tau:
            failures += 1
    assert failures == 0, f"{failures}/10000 bound violations"

    # greedy selection equals brute force for D, B <= 8
    import itertools

    for trial in range(30):
        d = int(rng.integers(2, 9))
        b = int(rng.integers(1, d + 1))
        basis = fit_basis(rng.normal(size=(20, d)), b)
        r = rng.normal(size=d)
        c = project(r, basis)
        for m in range(1, b + 1):
            greedy = np.sort(np.argsort(-np.abs(c), kind="stable")[:m])
            left_greedy = float(r @ r - np.sum(c[greedy] ** 2))
            best = min(float(r @ r - np.sum(c[list(s)] ** 2))
                       for s in itertools.combinations(range(b), m))
            assert left_greedy <= best + 1e-9
    _passed("5 error-bound guarantee",
            f"10000/10000 within tau ({fallbacks} lossless fallbacks); "
            "greedy selection matches brute force for D,B <= 8")


# --------------------------------------------------------------------------
# criterion 6: PCA against a dense eigendecomposition oracle
# --------------------------------------------------------------------------

def test_criterion_6_pca_correctness():
    rng = np.random.default_rng(19)
    worst_var = 0.0
    worst_orth = 0.0
    for _ in range(20):
        n, d = int(rng.integers(50, 400)), int(rng.integers(4, 32))
        b = int(rng.integers(1, d + 1))
        corpus = rng.normal(size=(n, d)) @ np.diag(10.0 ** rng.uniform(-1, 1, size=d))
        basis = fit_basis(corpus, b)
        centered = corpus - corpus.mean(axis=0)
        eigvals = np.sort(np.linalg.eigh(centered.T @ centered / (n - 1))[0])[::-1][:b]
        rel = np.max(np.abs(basis.explained_variance - eigvals) /
                     np.maximum(np.abs(eigvals), 1e-300))
        orth = np.max(np.abs(basis.matrix.T @ basis.matrix - np.eye(b)))
        worst_var = max(worst_var, rel)
        worst_orth = max(worst_orth, orth)
        assert rel < 1e-8, f"explained variance off by {rel}"
        assert orth < 1e-6, f"orthonormality off by {orth}"
    _passed("6 PCA correctness",
            f"explained variance within {worst_var:.2e} (tol 1e-8), "
            f"orthonormality within {worst_orth:.2e} (tol 1e-6)")


# --------------------------------------------------------------------------
# criteria 7-8: desk-scale end-to-end experiment (shared training fixture)
# --------------------------------------------------------------------------

@dataclass
class Experiment:
    field: ScalarField
    hold: ScalarField
    base: Models          # stage-1 + stage-2, full schedule
    finetuned: Models     # fine-tuned at 32 steps, basis fitted
    stage1_history: dict
    stage2_history: dict


TRAIN = (0, 384)
VAL = (384, 448)
HOLD = (448, 512)


@pytest.fixture(scope="session")
def experiment(tmp_path_factory) -> Experiment:
    torch.manual_seed(0)
    field = synth_data("advecting-blobs", (1, 512, 64, 64), seed=42)
    hold = ScalarField(data=field.data[:, HOLD[0]:HOLD[1]].copy(),
                       var_names=field.var_names, dtype_bits=32)

    cfg1 = RDTrainConfig(total_iters=int(3000 * SCALE), batch=8, patch=(32, 32),
                         lr_init=1e-3, lr_decay=(0.5, max(1, int(1500 * SCALE))),
                         lambda_init=1e-5, lambda_double_at=int(1500 * SCALE),
                         seed=0, log_every=250)
    codec, h1 = train_stage1(field, cfg1, frame_range=TRAIN)

    sched = build_schedule(200)
    torch.manual_seed(1)
    denoiser = Denoiser(DenoiserConfig(latent_channels=16, width=64, blocks=2, heads=4))
    latents = encode_all_latents(codec, field)
    batch_fn = latent_window_batch_fn(latents, batch=8, window=16,
                                      strategy=Strategy(kind="interpolation", interval=3),
                                      frame_range=TRAIN, intervals=[2, 3, 4, 5, 6], crop=8)
    h2 = train_denoiser(denoiser, sched, batch_fn, iters=int(3000 * SCALE), lr=3e-4,
                        seed=1, log_every=250)
    base = Models(codec=codec, denoiser=denoiser, sched=sched)

    den32 = copy.deepcopy(denoiser)
    finetune_reduced_steps(den32, sched, 32, batch_fn, iters=int(1000 * SCALE),
                           lr=1e-4, seed=2, log_every=250)
    finetuned = Models(codec=codec, denoiser=den32, sched=sched)
    val_field = ScalarField(data=field.data[:, VAL[0]:VAL[1]].copy(),
                            var_names=field.var_names, dtype_bits=32)
    finetuned.basis = fit_residual_basis(val_field, finetuned,
                                         PipelineConfig(interval=3, steps=32, seed=7),
                                         n_components=64, max_tiles=2000)
    base.basis = finetuned.basis
    return Experiment(field=field, hold=hold, base=base, finetuned=finetuned,
                      stage1_history=h1, stage2_history=h2)


def _run(models: Models, hold: ScalarField, cfg: PipelineConfig, baseline=False):
    container = compress(hold, models, cfg)
    decode = decompress_keyframe_hold if baseline else decompress
    recon = decode(container, models)
    return container, recon


def test_criterion_7_end_to_end(experiment):
    hold = experiment.hold
    details = []

    # training actually learned something
    h1 = experiment.stage1_history
    assert h1["loss"][-1] < h1["loss"][0]
    h2 = experiment.stage2_history
    assert np.mean(h2["loss"][-3:]) < np.mean(h2["loss"][:3])

    # (a) every container decodes within its tau
    tau = 0.01
    cfg = PipelineConfig(interval=3, steps=32, tau=tau, seed=0)
    container, recon = _run(experiment.finetuned, hold, cfg)
    rng_v = float(hold.data[0].max() - hold.data[0].min())
    tau_l2 = tau * rng_v * math.sqrt(32 * 32)
    worst = 0.0
    for t in range(hold.shape[1]):
        for y0 in range(0, 64, 32):
            for x0 in range(0, 64, 32):
                err = np.linalg.norm(
                    hold.data[0, t, y0:y0+32, x0:x0+32].astype(np.float64)
                    - recon.data[0, t, y0:y0+32, x0:x0+32].astype(np.float64))
                worst = max(worst, err)
    assert worst <= tau_l2, f"tile residual {worst} exceeds {tau_l2}"
    assert nrmse(hold, recon) <= tau
    details.append(f"(a) worst tile l2 {worst:.4g} <= {tau_l2:.4g}")

    # (b) generated frames err more than keyframes on average
    plain = PipelineConfig(interval=3, steps=32, seed=0)
    container_p, recon_p = _run(experiment.finetuned, hold, plain)
    per_frame = nrmse_per_frame(hold, recon_p)[0]
    kf_mask = np.zeros(hold.shape[1], dtype=bool)
    for block in container_p.blocks:
        partition = make_partition(block.n_frames, Strategy(kind="interpolation", interval=3))
        n_real = block.n_frames - block.n_pad
        for kf in partition.cond:
            if kf - 1 < n_real:
                kf_mask[block.t_start + kf - 1] = True
    kf_err = float(per_frame[kf_mask].mean())
    gen_err = float(per_frame[~kf_mask].mean())
    assert gen_err > kf_err, f"generated {gen_err} not above keyframe {kf_err}"
    details.append(f"(b) per-frame NRMSE keyframes {kf_err:.5f} < generated {gen_err:.5f}")

    # (c) correction-free NRMSE decreases as the interval goes 6 -> 2
    errs = {}
    for d in (2, 3, 6):
        _, r = _run(experiment.finetuned, hold, PipelineConfig(interval=d, steps=32, seed=0))
        errs[d] = nrmse(hold, r)
    assert errs[2] < errs[6], f"{errs}"
    assert errs[2] <= errs[3] * 1.02 and errs[3] <= errs[6] * 1.02, f"{errs}"
    details.append("(c) NRMSE by interval " +
                   " ".join(f"d={d}:{errs[d]:.5f}" for d in (2, 3, 6)))

    # (d) compression ratio at fixed tau increases with the interval
    ratios = {}
    tau_d = 0.02
    for d in (2, 3, 6):
        c, _ = _run(experiment.finetuned, hold,
                    PipelineConfig(interval=d, steps=32, tau=tau_d, seed=0))
        ratios[d] = compression_ratio(hold.nbytes, c.size_l, c.size_g)
    assert ratios[6] > ratios[2], f"{ratios}"
    assert ratios[6] >= ratios[3] * 0.98 and ratios[3] >= ratios[2] * 0.98, f"{ratios}"
    details.append("(d) ratio by interval " +
                   " ".join(f"d={d}:{ratios[d]:.1f}" for d in (2, 3, 6)))

    # (e) beats keyframe-hold at equal stored bytes (same container, no G)
    _, recon_hold = _run(experiment.finetuned, hold, plain, baseline=True)
    e_diff = nrmse(hold, recon_p)
    e_hold = nrmse(hold, recon_hold)
    assert e_diff < e_hold, f"diffusion {e_diff} vs hold {e_hold}"
    details.append(f"(e) diffusion {e_diff:.5f} < keyframe-hold {e_hold:.5f}")

    _passed("7 end-to-end desk experiment", "; ".join(details))


def test_criterion_8_reduced_step_trend(experiment):
    hold = experiment.hold
    _, r200 = _run(experiment.base, hold, PipelineConfig(interval=3, steps=200, seed=0))
    _, r32 = _run(experiment.finetuned, hold, PipelineConfig(interval=3, steps=32, seed=0))
    _, r1 = _run(experiment.finetuned, hold, PipelineConfig(interval=3, steps=1, seed=0))
    e200, e32, e1 = nrmse(hold, r200), nrmse(hold, r32), nrmse(hold, r1)
    assert e32 <= 1.1 * e200, f"S=32 {e32} vs 1.1 x S=200 {e200}"
    assert e1 > e32, f"S=1 {e1} not worse than S=32 {e32}"
    _passed("8 reduced-step trend",
            f"NRMSE S=200 {e200:.5f}, S=32 {e32:.5f} (<= 1.1x), S=1 {e1:.5f} (worse)")


# --------------------------------------------------------------------------
# criterion 9: container integrity + isolated decode
# --------------------------------------------------------------------------

def test_criterion_9_container_integrity(tmp_path):
    from latentzip.container import (BlockRecord, CompressedContainer, ContainerHeader)
    from latentzip.diffusion import LatentMinMax
    from latentzip.fields import FrameNormalization

    rng = np.random.default_rng(23)

    def random_container():
        dims = (1, int(rng.integers(1, 20)), 16, 16)
        header = ContainerHeader(
            dims=dims, dtype_bits=32, var_names=["v0"], var_ranges=[(0.0, 1.0)],
            window=8, tile=(8, 8), strategy="interpolation", interval=7, k=6,
            steps=int(rng.integers(1, 33)), seed=int(rng.integers(0, 2**63)),
            tau=None if rng.integers(2) else float(rng.random()),
            latent_channels=4, hyper_channels=2,
            codec_fingerprint="c" * 64, denoiser_fingerprint="d" * 64,
            basis_fingerprint="b" * 64)
        blocks = []
        for _ in range(int(rng.integers(0, 4))):
            nf = int(rng.integers(2, 9))
            blocks.append(BlockRecord(
                var_idx=0, t_start=0, n_frames=nf, n_pad=int(rng.integers(0, 2)),
                frame_norms=[FrameNormalization(float(rng.normal()),
                                                float(rng.random() + 0.01))
                             for _ in range(nf)],
                minmax=LatentMinMax(lo=0.0, hi=float(rng.integers(1, 9))),
                y_support=rng.integers(-9, 9, (4, 2)).astype(np.int32),
                z_support=rng.integers(-9, 9, (2, 2)).astype(np.int32),
                keyframe_codes=[(rng.bytes(int(rng.integers(0, 30))),
                                 rng.bytes(int(rng.integers(0, 90))))
                                for _ in range(int(rng.integers(1, 4)))],
                corrections=[rng.bytes(int(rng.integers(0, 40)))
                             for _ in range(int(rng.integers(0, 5)))]))
        return CompressedContainer(header=header, blocks=blocks)

    # 1000 fuzzed write/read round trips
    for case in range(1000):
        c = random_container()
        blob = write_container(c)
        back = read_container(blob)
        assert back.header == c.header
        assert len(back.blocks) == len(c.blocks)
        for a, b in zip(c.blocks, back.blocks):
            assert a.keyframe_codes == b.keyframe_codes
            assert a.corrections == b.corrections

    # corruption always detected
    blob = write_container(random_container())
    detected = 0
    for trial in range(300):
        mutated = bytearray(blob)
        pos = int(rng.integers(0, len(blob)))
        mutated[pos] ^= 1 << int(rng.integers(8))
        try:
            read_container(bytes(mutated))
        except ContainerError:
            detected += 1
    assert detected == 300, f"only {detected}/300 corruptions detected"

    # decompression in a fresh process with only container + checkpoints present
    torch.manual_seed(3)
    from latentzip.codec import LatentCodec

    codec = LatentCodec()
    codec.eval()
    denoiser = Denoiser(DenoiserConfig(latent_channels=16, width=32, blocks=1, heads=2))
    denoiser.eval()
    sched = build_schedule(40)
    field = synth_data("advecting-blobs", (1, 8, 64, 64), seed=5)
    basis = fit_basis(np.random.default_rng(0).normal(size=(1200, 1024)), 16)
    models = Models(codec=codec, denoiser=denoiser, sched=sched, basis=basis)
    container = compress(field, models, PipelineConfig(steps=2, window=8, interval=7,
                                                       tau=0.5, seed=1))
    expected = decompress(container, models)

    isolated = tmp_path / "isolated"
    isolated.mkdir()
    (isolated / "models").mkdir()
    save_codec(codec, isolated / "models" / "transform.pt")
    save_denoiser(denoiser, sched, isolated / "models" / "denoiser.pt")
    save_basis(basis, isolated / "models" / "basis.npz")
    (isolated / "data.lzkc").write_bytes(write_container(container))
    out = subprocess.run(
        [sys.executable, "-m", "latentzip.cli", "decompress", "--container", "data.lzkc",
         "--models", "models", "--out", "decoded.rtf"],
        cwd=isolated, capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    from latentzip.rawio import read_raw

    decoded = read_raw(isolated / "decoded.rtf")
    np.testing.assert_array_equal(decoded.data, expected.data)
    _passed("9 container integrity",
            "1000 fuzz round trips exact; 300/300 corruptions detected; "
            "isolated-process decode matches in-process decode bit for bit")
