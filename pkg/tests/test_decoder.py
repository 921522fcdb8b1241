import pytest
import torch

from tgqn.config import ConfigError, ModelConfig, RunConfig
from tgqn.decoder import GENERATION, TRAINING, LatentGaussian, SequentialDecoder
from tgqn.encoder import init_parameters

from conftest import MICRO


def decoder(cores=2, seed=0, **kw):
    cfg = RunConfig(**{**MICRO, "cores": cores, **kw}).model_config()
    dec = SequentialDecoder(cfg)
    init_parameters(dec, seed)
    return dec


def inputs(dec, b=2, n=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    s = dec.cfg.image_size
    return (torch.randn(b, n, dec.cfg.d, generator=g), torch.randn(b, n, 7, generator=g),
            torch.rand(b, n, 3, s, s, generator=g))


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def states_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.tensors(), b.tensors()))


class TestInitState:
    def test_zero_and_counts(self):
        dec = decoder(cores=4)
        st = dec.init_state(3)
        assert len(st.gen) == len(st.inf) == 4
        assert not st.canvas.any()
        assert st.canvas.shape == (3, 8, 8, 8)
        assert st.gen[0].hidden.shape == (3, 8, 2, 2)

    def test_default_config_canvas(self):
        cfg = ModelConfig()
        st = SequentialDecoder(cfg).init_state(1)
        assert st.canvas.shape == (1, 64, 32, 32) and not st.canvas.any()

    def test_repeatable(self):
        dec = decoder()
        assert states_equal(dec.init_state(2), dec.init_state(2))


def test_zero_cores_rejected():
    with pytest.raises(ConfigError):
        RunConfig(**{**MICRO, "cores": 0}).validate()


def test_unshared_decoder_is_a_stub():
    with pytest.raises(ConfigError):
        ModelConfig(share_decoder_across_steps=False).validate()


def test_reparameterization_identity():
    mu = torch.randn(2, 3, 4, 4)
    eps = torch.randn(2, 3, 4, 4)
    z = LatentGaussian(mu, torch.zeros_like(mu)).sample(eps)
    assert torch.equal(z, mu + eps)
    # dyadic values keep the subtraction exact
    g = torch.Generator().manual_seed(0)
    mu = torch.randint(-256, 256, (2, 3, 4, 4), generator=g) / 64.0
    eps = torch.randint(-256, 256, (2, 3, 4, 4), generator=g) / 64.0
    assert torch.equal(LatentGaussian(mu, torch.zeros_like(mu)).sample(eps) - mu, eps)


def test_log_variance_clamped():
    stats = torch.cat([torch.zeros(1, 2, 2, 2), torch.tensor([-50.0, 50.0]).view(1, 2, 1, 1).expand(1, 2, 2, 2)], 1)
    lg = LatentGaussian.from_stats(stats)
    assert lg.log_variance.min() == -10 and lg.log_variance.max() == 10


def test_generation_micro_step_deterministic():
    dec = decoder()
    r, v, _ = inputs(dec)
    st = dec.init_state(2)
    a = dec.micro_step(0, st, r[:, 0], v[:, 0], None, dec.draw_noise(2, gen(1), torch.float32))
    b = dec.micro_step(0, st, r[:, 0], v[:, 0], None, dec.draw_noise(2, gen(1), torch.float32))
    assert torch.equal(a[3], b[3]) and states_equal(a[0], b[0])
    assert a[2] is None


def test_micro_step_index_checked():
    dec = decoder()
    r, v, _ = inputs(dec)
    with pytest.raises(IndexError):
        dec.micro_step(2, dec.init_state(2), r[:, 0], v[:, 0], None, dec.draw_noise(2, gen(), torch.float32))


def test_canvas_update_matches_isolated_upsample():
    dec = decoder()
    r, v, x = inputs(dec)
    st = dec.init_state(2)
    for m in range(2):
        new, *_ = dec.micro_step(m, st, r[:, 0], v[:, 0], x[:, 0], dec.draw_noise(2, gen(m), torch.float32))
        contribution = dec.upsample[m](new.gen[m].hidden)
        assert torch.allclose(new.canvas - st.canvas, contribution, atol=1e-6, rtol=0)
        st = new


@pytest.mark.parametrize("mode", [TRAINING, GENERATION])
def test_single_core_counts(mode):
    dec = decoder(cores=1)
    r, v, x = inputs(dec)
    out = dec.render_step(r[:, 0], v[:, 0], x[:, 0] if mode == TRAINING else None, dec.init_state(2), mode, gen())
    assert len(out.priors) == 1
    assert len(out.posteriors) == (1 if mode == TRAINING else 0)


def test_threading_identity_between_calls():
    dec = decoder()
    r, v, x = inputs(dec)
    first = dec.render_step(r[:, 0], v[:, 0], x[:, 0], dec.init_state(2), TRAINING, gen())
    seen = []
    original = dec.micro_step

    def spy(m, state, *args):
        seen.append((m, state))
        return original(m, state, *args)

    dec.micro_step = spy
    dec.render_step(r[:, 1], v[:, 1], x[:, 1], first.state_out, TRAINING, gen())
    assert seen[0][0] == 0 and seen[0][1] is first.state_out
    assert states_equal(seen[0][1], first.state_out)


def test_training_differs_from_generation_when_posterior_diverges():
    dec = decoder()
    with torch.no_grad():
        for head in dec.posterior_heads:
            head.bias.fill_(2.0)
    r, v, x = inputs(dec)
    st = dec.init_state(2)
    t = dec.render_step(r[:, 0], v[:, 0], x[:, 0], st, TRAINING, gen())
    g = dec.render_step(r[:, 0], v[:, 0], None, st, GENERATION, gen())
    assert not torch.equal(t.predicted, g.predicted)


def test_mode_target_contract():
    dec = decoder()
    r, v, x = inputs(dec)
    st = dec.init_state(2)
    with pytest.raises(ValueError):
        dec.render_step(r[:, 0], v[:, 0], None, st, TRAINING)
    with pytest.raises(ValueError):
        dec.render_step(r[:, 0], v[:, 0], x[:, 0], st, GENERATION)
    with pytest.raises(ValueError):
        dec.render_step(r[:, 0], v[:, 0], None, st, "sampling")


def test_single_step_sequence_equals_render_step():
    dec = decoder()
    r, v, x = inputs(dec, n=1)
    (seq,) = dec.decode_sequence(r, v, x, TRAINING, gen(5))
    direct = dec.render_step(r[:, 0], v[:, 0], x[:, 0], dec.init_state(2), TRAINING, gen(5))
    assert torch.equal(seq.predicted, direct.predicted)
    assert states_equal(seq.state_out, direct.state_out)


def test_three_step_counts():
    dec = decoder(cores=2)
    r, v, x = inputs(dec, n=3)
    outs = dec.decode_sequence(r, v, x, TRAINING, gen())
    assert len(outs) == 3
    assert sum(len(o.priors) for o in outs) == sum(len(o.posteriors) for o in outs) == 6


@pytest.mark.parametrize("mode", [TRAINING, GENERATION])
def test_sequence_threading_sweep(mode):
    dec = decoder()
    r, v, x = inputs(dec, n=4)
    log = []
    outs = dec.decode_sequence(r, v, x if mode == TRAINING else None, mode, gen(),
                               on_step=lambda n, s_in, out: log.append((n, s_in, out)))
    assert [n for n, *_ in log] == [0, 1, 2, 3]
    assert states_equal(log[0][1], dec.init_state(2))
    for (_, _, prev), (_, s_in, _) in zip(log, log[1:]):
        assert s_in is prev.state_out
        assert states_equal(s_in, prev.state_out)
    assert outs == [o for *_, o in log]


def test_length_mismatch():
    dec = decoder()
    r, v, x = inputs(dec, n=3)
    with pytest.raises(ValueError):
        dec.decode_sequence(r, v[:, :2], x, TRAINING)
    with pytest.raises(ValueError):
        dec.decode_sequence(r, v, x[:, :2], TRAINING)


def test_outputs_in_unit_range_and_noise_matters():
    dec = decoder(seed=4)
    with torch.no_grad():
        for head in dec.prior_heads:
            head.bias.fill_(1.0)  # widen the prior so noise reaches the canvas
    r, v, _ = inputs(dec)
    a = dec.decode_sequence(r, v, None, GENERATION, gen(1))
    b = dec.decode_sequence(r, v, None, GENERATION, gen(1))
    c = dec.decode_sequence(r, v, None, GENERATION, gen(2))
    for o in a:
        assert o.predicted.min() >= 0 and o.predicted.max() <= 1
    assert all(torch.equal(x.predicted, y.predicted) for x, y in zip(a, b))
    assert not torch.equal(a[-1].predicted, c[-1].predicted)


def test_float64_copy_sees_same_noise():
    dec = decoder()
    e32 = dec.draw_noise(2, gen(9), torch.float32)
    e64 = dec.draw_noise(2, gen(9), torch.float64)
    assert torch.equal(e32.double(), e64)
