import numpy as np
import pytest

from attractorsep import diffcore as dc
from attractorsep.data import CorpusSpec, in_memory_corpus, mix, synthesize_source
from attractorsep.diffcore import Tape
from attractorsep.dsp import Waveform, stft
from attractorsep.errors import (
    ArtifactMismatchError,
    InvalidInputError,
    NumericsError,
)
from attractorsep.model import EmbeddingNetwork, NetConfig
from attractorsep.train import (
    Adam,
    TrainConfig,
    learning_rate_at,
    load_checkpoint,
    save_checkpoint,
    separate,
    evaluate,
    train,
    utterance_loss,
    write_metrics_log,
)

from helpers import rel_err


def tiny_net(seed=0, f=257):
    return EmbeddingNetwork(
        NetConfig(input_dim=f, embedding_dim=6, hidden=32,
                  recurrent_layers=1, recurrent_units=16, seed=seed)
    )


def tiny_corpus(seed=5, n_train=12, duration=0.4):
    spec = CorpusSpec(n_train=n_train, n_val=2, n_test=2, k_set=(2,),
                      duration_s=duration, sample_rate=8000,
                      source_family="am_noise", seed=seed)
    return in_memory_corpus(spec)


def test_lr_schedule_matches_staged_divisors():
    cfg = TrainConfig(epochs=350)
    got = [learning_rate_at(cfg, e) for e in (1, 150, 225, 300, 325)]
    want = [1e-3, 1e-3 / 3, 1e-4, 1e-3 / 30, 1e-5]
    assert np.allclose(got, want, rtol=1e-12)
    # value holds within a stage
    assert learning_rate_at(cfg, 149) == 1e-3
    assert learning_rate_at(cfg, 224) == 1e-3 / 3
    assert learning_rate_at(cfg, 349) == 1e-5


def test_train_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(epochs=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(loss_head="adanet")
    with pytest.raises(InvalidInputError):
        TrainConfig(lr_schedule=((10, 3.0), (5, 10.0)))
    with pytest.raises(InvalidInputError):
        TrainConfig(lr_schedule=((10, 0.5),))


def test_adam_first_step_is_signed_lr():
    net = tiny_net(f=8)
    opt = Adam(net)
    name, p = net.param_items()[0]
    before = p.data.copy()
    g = np.ones_like(p.data)
    p.grad = g
    opt.step(lr=1e-3)
    # bias-corrected first step moves by lr * g / (|g| + eps)
    np.testing.assert_allclose(before - p.data, 1e-3 * np.sign(g), rtol=1e-6)


@pytest.mark.parametrize("head", ["danet", "kmeans_danet"])
def test_single_step_decreases_batch_loss(head):
    ds = tiny_corpus(n_train=2, duration=0.3)
    net = tiny_net()
    cfg = TrainConfig(epochs=1, batch_size=2, k=2, seed=0, loss_head=head,
                      metric="spherical", L_unfold=2, learning_rate=1e-4)
    mix_spec = stft(ds.train[0][0])
    src_specs = [stft(s) for s in ds.train[0][1]]

    def batch_loss():
        with Tape():
            loss, _ = utterance_loss(net, mix_spec, src_specs, cfg, utt_seed=0)
        return float(loss.data)

    before = batch_loss()
    opt = Adam(net)
    with Tape() as tape:
        loss, _ = utterance_loss(net, mix_spec, src_specs, cfg, utt_seed=0)
        tape.backward(loss)
    opt.step(cfg.learning_rate)
    net.zero_grads()
    assert batch_loss() < before


def test_kmeans_head_l1_all_weight_gradients_finite():
    ds = tiny_corpus(n_train=1, duration=0.3)
    net = tiny_net()
    cfg = TrainConfig(epochs=1, k=2, loss_head="kmeans_danet", metric="spherical",
                      L_unfold=1)
    mix_spec = stft(ds.train[0][0])
    src_specs = [stft(s) for s in ds.train[0][1]]
    with Tape() as tape:
        loss, _ = utterance_loss(net, mix_spec, src_specs, cfg, utt_seed=3)
        tape.backward(loss)
    for name, p in net.param_items():
        assert p.grad is not None, name
        assert np.all(np.isfinite(p.grad)), name


def test_kmeans_head_gradient_matches_finite_differences():
    # end-to-end: weights -> embeddings -> unfolded layer -> masks -> PIT
    rng = np.random.default_rng(0)
    f = 5
    net = EmbeddingNetwork(NetConfig(input_dim=f, embedding_dim=3, hidden=6,
                                     recurrent_layers=1, recurrent_units=4, seed=1))
    cfg = TrainConfig(epochs=1, k=2, loss_head="kmeans_danet", metric="spherical",
                      L_unfold=2)
    from attractorsep.dsp import Spectrogram

    def specs_from(seed):
        r = np.random.default_rng(seed)
        mag = r.uniform(0.1, 1.0, (4, f))
        s1 = mag * r.uniform(0, 1, (4, f))
        s2 = mag - s1
        phase = np.zeros((4, f))
        mk = lambda m: Spectrogram(magnitude=m, phase=phase, frame_len=2 * (f - 1),
                                   hop=f - 1, sample_rate=8000)
        return mk(mag), [mk(s1), mk(s2)]

    def loss_value():
        with Tape():
            loss, _ = utterance_loss(net, mix_spec, src_specs, cfg, utt_seed=7)
        return float(loss.data)

    found = False
    for seed in range(20):
        mix_spec, src_specs = specs_from(seed)
        with Tape() as tape:
            loss, _ = utterance_loss(net, mix_spec, src_specs, cfg, utt_seed=7)
            tape.backward(loss)
        grads = {name: p.grad.copy() for name, p in net.param_items()}
        net.zero_grads()
        # screen for assignment stability: re-evaluate after a nudge
        stable = True
        for name in ("dec1_w", "rnn0_f_wx"):
            p = net.params[name]
            flat = p.data.reshape(-1)
            for j in range(0, flat.size, max(1, flat.size // 4)):
                h = 1e-6
                orig = flat[j]
                flat[j] = orig + h
                up = loss_value()
                flat[j] = orig - h
                down = loss_value()
                flat[j] = orig
                fd = (up - down) / (2 * h)
                an = grads[name].reshape(-1)[j]
                if abs(fd - an) > 1e-4 * max(1.0, abs(fd)):
                    stable = False
        if stable:
            found = True
            break
    assert found, "no stable instance found for weight-space gradient check"


def test_degenerate_utterance_skipped_not_fatal():
    rate = 8000
    n = 3200
    t = np.arange(n) / rate
    loud = Waveform(samples=0.5 * np.sin(2 * np.pi * 500 * t), sample_rate=rate)
    # second "source" carries no energy at all: it dominates nothing
    silent = Waveform(samples=np.zeros(n), sample_rate=rate)
    ghost_mix = Waveform(samples=loud.samples.copy(), sample_rate=rate)
    ds = tiny_corpus(n_train=2, duration=0.4)
    ds.train.append((ghost_mix, [loud, silent]))
    net = tiny_net()
    cfg = TrainConfig(epochs=2, batch_size=4, k=2, seed=0, loss_head="danet",
                      metric="spherical", val_every=5)
    res = train(net, ds, cfg)
    assert res.skipped == 2  # once per epoch
    assert len(res.log) == 2
    assert np.isfinite(res.log[-1]["train_loss"])


def test_nan_loss_aborts_with_diagnostic():
    ds = tiny_corpus(n_train=2, duration=0.3)
    net = tiny_net()
    net.params["dec1_w"].data[0, 0] = np.nan
    cfg = TrainConfig(epochs=1, batch_size=2, k=2, loss_head="danet", val_every=5)
    with pytest.raises(NumericsError):
        train(net, ds, cfg)


@pytest.fixture(scope="module")
def quick_model():
    ds = tiny_corpus(seed=9, n_train=16, duration=0.4)
    net = tiny_net(seed=1)
    cfg = TrainConfig(epochs=20, batch_size=4, k=2, seed=1, loss_head="danet",
                      metric="spherical", val_every=20,
                      lr_schedule=((15, 3.0),))
    res = train(net, ds, cfg)
    return res, ds


def test_train_log_shape_and_fixed_attractors(quick_model):
    res, _ = quick_model
    assert len(res.log) == 20
    assert set(res.log[0]) == {"epoch", "train_loss", "val_si_sdri", "lr"}
    losses = [row["train_loss"] for row in res.log]
    assert losses[-1] < losses[0]
    assert res.model.fixed_attractors is not None
    assert res.model.fixed_attractors.shape == (2, 6)
    assert np.isfinite(res.log[-1]["val_si_sdri"])


def test_separate_shape_contract(quick_model):
    res, ds = quick_model
    mix_w, _ = ds.test[0]
    for strat in ("e1", "e2-euclid", "e2-spherical", "unfolded"):
        outs = separate(res.model, mix_w, strategy=strat, inference_iters=5)
        assert len(outs) == 2
        for o in outs:
            assert len(o.samples) == len(mix_w.samples)
            assert o.sample_rate == mix_w.sample_rate


def test_separate_outputs_sum_to_mixture(quick_model):
    # masks sum to one per bin and analysis is edge-padded, so the
    # estimates reconstruct the mixture over the whole signal
    res, ds = quick_model
    mix_w, _ = ds.test[0]
    outs = separate(res.model, mix_w, strategy="e2-spherical")
    total = np.sum([o.samples for o in outs], axis=0)
    assert np.max(np.abs(total - mix_w.samples)) < 1e-9


def test_separate_band_oracle(quick_model):
    # each estimate's dominant band must match a distinct source band
    res, ds = quick_model
    from attractorsep.data import SLOT_BANDS

    def band_energy(w, lo, hi):
        spec = np.abs(np.fft.rfft(w.samples)) ** 2
        freqs = np.fft.rfftfreq(len(w.samples), 1.0 / w.sample_rate)
        return spec[(freqs >= lo) & (freqs <= hi)].sum()

    hits = 0
    for mix_w, src_ws in ds.test:
        outs = separate(res.model, mix_w, strategy="e2-spherical")
        src_bands = []
        for s in src_ws:
            fracs = [band_energy(s, lo, hi) for lo, hi in SLOT_BANDS]
            src_bands.append(int(np.argmax(fracs)))
        est_bands = []
        for o in outs:
            fracs = [band_energy(o, lo, hi) for lo, hi in SLOT_BANDS]
            est_bands.append(int(np.argmax(fracs)))
        if sorted(est_bands) == sorted(src_bands):
            hits += 1
    assert hits == len(ds.test)


def test_separate_cross_k_inference(quick_model):
    # model trained with k=2 must run k=3 inference on a 3-source mixture
    res, _ = quick_model
    srcs = [
        synthesize_source("am_noise", {"slot": s}, 0.4, 8000, seed=30 + s)
        for s in range(3)
    ]
    mixture, _ = mix(srcs, [0.0, 0.0, 0.0])
    outs = separate(res.model, mixture, k=3, strategy="unfolded", inference_iters=5)
    assert len(outs) == 3
    for o in outs:
        assert len(o.samples) == len(mixture.samples)
    total = np.sum([o.samples for o in outs], axis=0)
    assert np.max(np.abs(total - mixture.samples)) < 1e-9


def test_separate_rejects_rate_mismatch(quick_model):
    res, _ = quick_model
    w = Waveform(samples=np.zeros(16000), sample_rate=16000)
    with pytest.raises(InvalidInputError):
        separate(res.model, w)


def test_e1_requires_fixed_attractors():
    ds = tiny_corpus(n_train=2, duration=0.3)
    net = tiny_net()
    cfg = TrainConfig(epochs=1, batch_size=2, k=2, loss_head="kmeans_danet",
                      L_unfold=1, val_every=5)
    res = train(net, ds, cfg)
    assert res.model.fixed_attractors is None
    with pytest.raises(ArtifactMismatchError):
        separate(res.model, ds.test[0][0], strategy="e1")


def test_e1_rejects_mismatched_k(quick_model):
    res, ds = quick_model
    with pytest.raises(ArtifactMismatchError):
        separate(res.model, ds.test[0][0], k=3, strategy="e1")


def test_checkpoint_round_trip(tmp_path, quick_model):
    res, ds = quick_model
    path = tmp_path / "model.ckpt"
    save_checkpoint(res.model, path)
    loaded = load_checkpoint(path)
    for (na, pa), (nb, pb) in zip(res.model.net.param_items(), loaded.net.param_items()):
        assert na == nb
        assert np.array_equal(pa.data, pb.data)
    assert np.array_equal(loaded.fixed_attractors, res.model.fixed_attractors)
    assert loaded.head == "danet" and loaded.metric == "spherical"
    mix_w, _ = ds.test[0]
    a = separate(res.model, mix_w, strategy="e2-spherical")
    b = separate(loaded, mix_w, strategy="e2-spherical")
    for x, y in zip(a, b):
        assert np.array_equal(x.samples, y.samples)


def test_checkpoint_bad_magic_rejected(tmp_path, quick_model):
    res, _ = quick_model
    path = tmp_path / "model.ckpt"
    save_checkpoint(res.model, path)
    raw = bytearray(path.read_bytes())
    raw[:8] = b"NOTMODEL"
    path.write_bytes(bytes(raw))
    with pytest.raises(ArtifactMismatchError):
        load_checkpoint(path)


def test_checkpoint_truncation_rejected(tmp_path, quick_model):
    res, _ = quick_model
    path = tmp_path / "model.ckpt"
    save_checkpoint(res.model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(ArtifactMismatchError):
        load_checkpoint(path)


def test_evaluate_and_metrics_log(tmp_path, quick_model):
    res, ds = quick_model
    mean, scores = evaluate(res.model, ds.test, "e2-spherical")
    assert len(scores) == len(ds.test)
    assert np.isfinite(mean)
    with pytest.raises(InvalidInputError):
        evaluate(res.model, [], "e2-spherical")
    log_path = tmp_path / "log.csv"
    write_metrics_log(res.log, log_path)
    lines = log_path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_si_sdri,lr"
    assert len(lines) == 1 + len(res.log)
