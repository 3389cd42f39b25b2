"""Flow matching, Euler sampling, two-stage generation, and the train loop."""

import math

import pytest
import torch

from mmctl.checkpoint import backbone_checksum, load_model
from mmctl.codecs import AudioCodec, VideoCodec
from mmctl.diffusion import (
    GenRequest,
    GuidanceParams,
    NoiseSchedule,
    Pipeline,
    TrainBatch,
    TrainHyper,
    build_cache,
    cfg_combine,
    downsample_frames,
    euler_sample,
    fm_loss,
    make_batch,
    noise_interpolate,
    train_loop,
    two_stage_generate,
    two_stage_generate_batch,
    upsample_latents,
)
from mmctl.errors import ConfigError, InputError, ShapeError
from mmctl.mmcu import build_control_unit
from mmctl.model import ModelConfig, attach_bypass, freeze_backbone, init_backbone, stack_units
from mmctl.numerics import Rng
from mmctl.prompt import parse_prompt
from mmctl.synthdata import DataConfig, gen_dataset

PX, FRAMES, SPF, SR = 16, 4, 64, 640


def small_cfg() -> ModelConfig:
    return ModelConfig(
        layers=2, d_model=32, heads=2, d_text=16, vocab=256, max_text_len=16,
        frames=FRAMES, frame_px=PX, audio_dim=SPF, k_max=4, ffn_mult=2, sigma_dim=16,
    )


def data_cfg() -> DataConfig:
    return DataConfig(frame_px=PX, frames=FRAMES, k=2, samples_per_frame=SPF, kappa=1.5)


@pytest.fixture(scope="module")
def codecs():
    return VideoCodec(PX, PX), VideoCodec(PX // 2, PX // 2), AudioCodec(SPF, SR)


@pytest.fixture(scope="module")
def model():
    m = init_backbone(small_cfg(), Rng(7))
    with torch.no_grad():
        for p in m.parameters():
            p.add_(torch.randn(p.shape, generator=torch.Generator().manual_seed(1)) * 0.01)
    m.eval()
    return m


@pytest.fixture(scope="module")
def unit(model, codecs):
    codec_hi, codec_lo, audio_codec = codecs
    prompt = parse_prompt("[VISUAL]: a blue square [SPEECH]: speaker one")
    with torch.no_grad():
        text = model.encode_prompt(prompt)
    return stack_units(
        [build_control_unit(text, FRAMES, codec_lo, audio_codec, k_default=2)]
    )


# -- schedules ------------------------------------------------------------------


def test_stage1_schedule_endpoints_and_monotone():
    sched = NoiseSchedule(stage1_steps=32).stage1()
    assert len(sched) == 33
    assert sched[0] == pytest.approx(1.0) and sched[-1] == pytest.approx(0.0)
    assert all(b < a for a, b in zip(sched, sched[1:]))


def test_stage2_schedule_starts_at_sigma0():
    sched = NoiseSchedule(stage2_steps=3, sigma0=0.25).stage2()
    assert len(sched) == 4
    assert sched[0] == pytest.approx(0.25) and sched[-1] == pytest.approx(0.0)
    assert all(b < a for a, b in zip(sched, sched[1:]))


def test_schedule_validation():
    with pytest.raises(ConfigError):
        NoiseSchedule(stage1_steps=0)
    with pytest.raises(ConfigError):
        NoiseSchedule(sigma0=1.5)


def test_guidance_validation():
    with pytest.raises(ConfigError):
        GuidanceParams(cfg_scale=-1.0)
    with pytest.raises(InputError):
        GuidanceParams(gamma_v=float("nan"))


# -- interpolation and guidance algebra ------------------------------------------


def test_noise_interpolate_endpoints():
    clean = torch.randn(3, 5, generator=torch.Generator().manual_seed(0))
    eps = torch.randn(3, 5, generator=torch.Generator().manual_seed(1))
    noisy0, vel0 = noise_interpolate(clean, eps, torch.zeros(3))
    assert torch.allclose(noisy0, clean)
    noisy1, _ = noise_interpolate(clean, eps, torch.ones(3))
    assert torch.allclose(noisy1, eps)
    assert torch.allclose(vel0, eps - clean)


def test_noise_interpolate_is_linear_path():
    clean = torch.full((2, 4), 2.0)
    eps = torch.full((2, 4), -2.0)
    noisy, _ = noise_interpolate(clean, eps, torch.tensor([0.25, 0.75]))
    assert torch.allclose(noisy[0], torch.full((4,), 1.0))
    assert torch.allclose(noisy[1], torch.full((4,), -1.0))


def test_noise_interpolate_validation():
    with pytest.raises(ShapeError):
        noise_interpolate(torch.zeros(2, 3), torch.zeros(3, 2), 0.5)
    with pytest.raises(InputError):
        noise_interpolate(torch.zeros(2), torch.zeros(2), 1.5)


def test_cfg_combine_identities():
    cond = torch.randn(4, generator=torch.Generator().manual_seed(2))
    uncond = torch.randn(4, generator=torch.Generator().manual_seed(3))
    assert torch.allclose(cfg_combine(cond, uncond, 1.0), cond)
    assert torch.allclose(cfg_combine(cond, uncond, 0.0), uncond)
    assert torch.allclose(
        cfg_combine(cond, uncond, 4.0), uncond + 4.0 * (cond - uncond)
    )
    with pytest.raises(ShapeError):
        cfg_combine(torch.zeros(2), torch.zeros(3), 1.0)


# -- latent resampling ------------------------------------------------------------


def test_upsample_latents_replicates_blocks():
    v = torch.arange(2 * 2 * 4 * 3, dtype=torch.float32).reshape(2, 2, 4, 3)
    up = upsample_latents(v, 2, 4)
    assert up.shape == (2, 2, 16, 3)
    lo = v.reshape(2, 2, 2, 2, 3)
    hi = up.reshape(2, 2, 4, 4, 3)
    for r in range(4):
        for c in range(4):
            assert torch.equal(hi[:, :, r, c], lo[:, :, r // 2, c // 2])


def test_upsample_latents_validation():
    with pytest.raises(ShapeError):
        upsample_latents(torch.zeros(1, 2, 4, 3), 2, 8)
    with pytest.raises(ShapeError):
        upsample_latents(torch.zeros(1, 2, 5, 3), 2, 4)


def test_downsample_frames_block_mean():
    f = torch.zeros(4, 4)
    f[0, 0] = 4.0
    down = downsample_frames(f)
    assert down.shape == (2, 2)
    assert down[0, 0] == pytest.approx(1.0) and down[1, 1] == pytest.approx(0.0)
    rgb = torch.rand(3, 4, 4, 3, generator=torch.Generator().manual_seed(4))
    drgb = downsample_frames(rgb)
    assert drgb.shape == (3, 2, 2, 3)
    assert torch.allclose(drgb[1, 0, 0], rgb[1, :2, :2].mean(dim=(0, 1)))


# -- sampling ---------------------------------------------------------------------


def test_euler_sample_deterministic(model, unit):
    sched = NoiseSchedule(stage1_steps=4).stage1()
    guid = GuidanceParams(cfg_scale=2.0)
    a = euler_sample(model, unit, sched, guid, model.cfg.grid_lo, Rng(5))
    b = euler_sample(model, unit, sched, guid, model.cfg.grid_lo, Rng(5))
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    c = euler_sample(model, unit, sched, guid, model.cfg.grid_lo, Rng(6))
    assert not torch.equal(a[0], c[0])


def test_euler_sample_cfg_scale_one_skips_uncond(model, unit):
    """s=1 short-circuit must equal the explicit combine by algebra."""
    sched = NoiseSchedule(stage1_steps=3).stage1()
    fast = euler_sample(model, unit, sched, GuidanceParams(cfg_scale=1.0),
                        model.cfg.grid_lo, Rng(5))
    explicit = euler_sample(model, unit, sched, GuidanceParams(cfg_scale=1.0 + 1e-12),
                            model.cfg.grid_lo, Rng(5))
    assert torch.allclose(fast[0], explicit[0], atol=1e-5)
    assert torch.allclose(fast[1], explicit[1], atol=1e-5)


def test_euler_sample_rejects_bad_schedules(model, unit):
    guid = GuidanceParams()
    with pytest.raises(InputError, match="two sigma"):
        euler_sample(model, unit, [1.0], guid, model.cfg.grid_lo, Rng(0))
    with pytest.raises(InputError, match="decreasing"):
        euler_sample(model, unit, [0.5, 1.0], guid, model.cfg.grid_lo, Rng(0))


def test_euler_sample_shapes(model, unit):
    sched = NoiseSchedule(stage1_steps=2).stage1()
    x_v, x_a = euler_sample(model, unit, sched, GuidanceParams(), model.cfg.grid_lo, Rng(1))
    g = model.cfg.grid_lo
    assert x_v.shape == (1, FRAMES, g * g, model.cfg.video_dim)
    assert x_a.shape == (1, FRAMES, SPF)


# -- two-stage pipeline ------------------------------------------------------------


def make_pipeline(model, codecs) -> Pipeline:
    codec_hi, codec_lo, audio_codec = codecs
    return Pipeline(model, codec_hi, codec_lo, audio_codec)


def test_two_stage_output_contract(model, codecs):
    pipe = make_pipeline(model, codecs)
    prompt = parse_prompt("[VISUAL]: a red square [SPEECH]: speaker two")
    sched = NoiseSchedule(stage1_steps=3, stage2_steps=2, sigma0=0.25)
    frames, wave = two_stage_generate(pipe, prompt, GuidanceParams(cfg_scale=2.0), sched, Rng(9))
    assert frames.shape == (FRAMES, PX, PX, 3)
    assert wave.shape == (FRAMES * SPF,)
    assert float(frames.min()) >= 0.0 and float(frames.max()) <= 1.0
    assert float(wave.abs().max()) <= 1.0


def test_two_stage_rejects_stage2_cfg(model, codecs):
    pipe = make_pipeline(model, codecs)
    prompt = parse_prompt("[VISUAL]: a red square [SPEECH]: speaker two")
    guid = GuidanceParams(stage2_cfg_scale=2.0)
    with pytest.raises(ConfigError, match="CFG disabled"):
        two_stage_generate(pipe, prompt, guid, NoiseSchedule(), Rng(0))


def test_two_stage_deterministic_and_batch_consistent(model, codecs):
    pipe = make_pipeline(model, codecs)
    prompt = parse_prompt("[VISUAL]: a green square [SPEECH]: speaker one")
    sched = NoiseSchedule(stage1_steps=2, stage2_steps=2, sigma0=0.25)
    guid = GuidanceParams(cfg_scale=1.5)
    f1, w1 = two_stage_generate(pipe, prompt, guid, sched, Rng(3))
    f2, w2 = two_stage_generate(pipe, prompt, guid, sched, Rng(3))
    assert torch.equal(f1, f2) and torch.equal(w1, w2)


def test_two_stage_media_inputs_change_output(model, codecs):
    pipe = make_pipeline(model, codecs)
    # media inputs only matter once a bypass exists, so attach one and
    # perturb it away from the transparent zero state
    freeze_backbone(model)
    attach_bypass(model, Rng(2).split("bp"))
    with torch.no_grad():
        for name, p in model.bypass.named_parameters():
            if "out_proj" in name:
                p.add_(torch.randn(p.shape, generator=torch.Generator().manual_seed(11)) * 0.05)
    prompt = parse_prompt("[VISUAL]: a square [SPEECH]: a speaker")
    sched = NoiseSchedule(stage1_steps=2, stage2_steps=2, sigma0=0.25)
    guid = GuidanceParams(cfg_scale=1.0)
    plain = GenRequest(prompt)
    with_ref = GenRequest(prompt, ref_image=torch.rand(PX, PX, 3, generator=torch.Generator().manual_seed(12)))
    f0, _ = two_stage_generate_batch(pipe, [plain], guid, sched, Rng(4))
    f1, _ = two_stage_generate_batch(pipe, [with_ref], guid, sched, Rng(4))
    assert not torch.equal(f0, f1)


# -- training loop -----------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_cache(codecs):
    codec_hi, codec_lo, audio_codec = codecs
    samples = gen_dataset(123, 6, data_cfg())
    return build_cache(samples, codec_hi, codec_lo, audio_codec)


def test_fm_loss_zero_model_predicts_noise_minus_clean(tiny_cache):
    """With zero heads the prediction is 0, so the loss is E||eps - x0||^2."""
    m = init_backbone(small_cfg(), Rng(21))
    batch = make_batch(m, tiny_cache, [0, 1, 2, 3], "hi", Rng(2))
    loss = fm_loss(m, batch, m.cfg.grid_hi)
    target = 0.0
    rng = Rng(2).split("loss")
    clean_v = batch.clean_v
    # the expected value: mean over (eps - clean)^2 for both modalities
    eps_v = rng.split("eps_v").normal(batch.clean_v.shape)
    eps_a = rng.split("eps_a").normal(batch.clean_a.shape)
    target = ((eps_v - batch.clean_v) ** 2).mean() + ((eps_a - batch.clean_a) ** 2).mean()
    assert float(loss.detach()) == pytest.approx(float(target), rel=1e-5)


def test_fm_loss_rejects_empty_batch(tiny_cache):
    m = init_backbone(small_cfg(), Rng(21))
    batch = TrainBatch(
        clean_v=torch.zeros(0, FRAMES, 4, m.cfg.video_dim),
        clean_a=torch.zeros(0, FRAMES, SPF),
        units=[],
        rng=Rng(0),
    )
    with pytest.raises(InputError, match="empty"):
        fm_loss(m, batch, m.cfg.grid_lo)


def test_fm_loss_gradient_reaches_trainable_params(tiny_cache):
    m = init_backbone(small_cfg(), Rng(22))
    batch = make_batch(m, tiny_cache, [0, 1], "lo", Rng(3))
    loss = fm_loss(m, batch, m.cfg.grid_lo)
    loss.backward()
    grads = [p.grad for p in m.parameters() if p.grad is not None]
    assert grads and any(float(g.abs().sum()) > 0 for g in grads)


def test_train_loop_logs_and_checkpoints(tiny_cache, tmp_path):
    m = init_backbone(small_cfg(), Rng(23))
    hyp = TrainHyper(steps=4, batch=2, grad_accum=1, peak_lr=1e-3, warmup=2, log_every=100)
    final, lines = train_loop(m, tiny_cache, "pretrain", hyp, Rng(6), tmp_path, quiet=True)
    assert final.name == "pretrain-final.mmck" and final.is_file()
    assert [s for s, _, _ in lines] == [1, 2, 3, 4]
    logged = (tmp_path / "loss.log").read_text().strip().splitlines()
    assert len(logged) == 4
    assert logged[0].startswith("step=1 lr=") and " loss=" in logged[0]
    _, meta, tensors = load_model(final)
    assert meta["phase"] == "pretrain" and meta["step"] == 4
    assert any(k.startswith("opt.") for k in tensors)


def test_train_loop_resume_matches_straight_run(tiny_cache, tmp_path):
    """Resuming from a periodic checkpoint reproduces the uninterrupted run."""
    hyp = TrainHyper(steps=6, batch=2, grad_accum=1, peak_lr=1e-3, warmup=2,
                     log_every=100, ckpt_every=3)

    m_full = init_backbone(small_cfg(), Rng(24))
    train_loop(m_full, tiny_cache, "pretrain", hyp, Rng(8), tmp_path / "full", quiet=True)

    mid, meta, tensors = load_model(tmp_path / "full" / "pretrain-000003.mmck")
    assert meta["step"] == 3
    opt_state = {k: v for k, v in tensors.items() if k.startswith("opt.")}
    train_loop(
        mid, tiny_cache, "pretrain", hyp, Rng(8), tmp_path / "part",
        resume_opt=opt_state, start_step=3, quiet=True,
    )

    for (n1, p1), (n2, p2) in zip(
        sorted(m_full.named_parameters()), sorted(mid.named_parameters())
    ):
        assert n1 == n2
        assert torch.allclose(p1, p2, atol=1e-6), n1


def test_train_loop_control_phase_keeps_backbone_frozen(tiny_cache, tmp_path):
    m = init_backbone(small_cfg(), Rng(25))
    freeze_backbone(m)
    attach_bypass(m, Rng(25).split("bp"))
    before = backbone_checksum(m)
    hyp = TrainHyper(steps=3, batch=2, grad_accum=1, peak_lr=1e-2, warmup=1, log_every=100)
    train_loop(m, tiny_cache, "control", hyp, Rng(9), tmp_path, quiet=True)
    assert backbone_checksum(m) == before


def test_train_loop_aborts_on_nonfinite_loss(tiny_cache, tmp_path):
    m = init_backbone(small_cfg(), Rng(26))
    with torch.no_grad():
        m.backbone.head_v.weight.fill_(float("nan"))
    hyp = TrainHyper(steps=2, batch=2, grad_accum=1, warmup=1, log_every=100)
    with pytest.raises(InputError, match="non-finite"):
        train_loop(m, tiny_cache, "pretrain", hyp, Rng(10), tmp_path, quiet=True)
    assert (tmp_path / "diagnostic.mmck").is_file()


def test_train_loop_rejects_empty_dataset(tmp_path):
    m = init_backbone(small_cfg(), Rng(27))
    with pytest.raises(InputError, match="empty"):
        train_loop(m, [], "pretrain", TrainHyper(steps=1), Rng(0), tmp_path, quiet=True)
