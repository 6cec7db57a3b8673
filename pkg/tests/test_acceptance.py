"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints one ``PASS``/``FAIL`` line (also collected into the
terminal summary).  Runtime limits count as part of the criterion.
"""

import functools
import itertools
import time

import numpy as np
import pytest

from anchornet.autodiff import Tensor, grad_check
from anchornet import autodiff as ad
from anchornet.errors import ChecksumError, CheckpointError, VersionMismatch
from anchornet.flops import REFERENCE_STATS, pipeline_ratio
from anchornet.localize import Heatmap, LipParams, lip, visit_budget
from anchornet.model import AnchorNetT, ModelConfig, accuracy_by_branch
from anchornet.pipeline import fgsm_eval, run_localize
from anchornet.rf import LayerGeom, compose, layer_sizes, map_location, output_size, patch_grid
from anchornet.serialization import (_PREFIX, MAGIC, Checkpoint, checkpoint_bytes, checkpoint_from_bytes)
from anchornet.stack import builtin_stack

from conftest import ACCEPTANCE_LINES, bounding_rect, lip_oracle, traced_support


def criterion(number, title, limit=None):
    """Run the body (returning ``(ok, detail)``), time it and emit the verdict line."""
    def wrap(body):
        @functools.wraps(body)
        def test(*args, **kwargs):
            start = time.perf_counter()
            try:
                ok, detail = body(*args, **kwargs)
            except Exception as exc:
                ok, detail = False, f"raised {type(exc).__name__}: {exc}"
            seconds = time.perf_counter() - start
            if limit is not None and seconds >= limit:
                ok, detail = False, f"{detail}; over the {limit:g} s budget"
            line = f"{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail} ({seconds:.1f} s)"
            print(line)
            ACCEPTANCE_LINES.append(line)
            assert ok, line
        return test
    return wrap


def toy_config(rng, **kw):
    kernels = sorted(rng.choice([1, 3, 5, 7], size=int(rng.integers(1, 4)), replace=False).tolist())
    base = dict(vocab_size=int(rng.integers(4, 16)), embed_dim=int(rng.integers(2, 6)),
                seq_len=int(rng.integers(9, 16)), head_channels=tuple(int(rng.integers(2, 6)) for _ in range(2)),
                branch_kernels=tuple(kernels), branch_channels=int(rng.integers(2, 6)),
                attention_channels=int(rng.integers(2, 6)), num_classes=int(rng.integers(2, 5)),
                nonlinearity=str(rng.choice(["relu", "tanh"])), aux_loss_weight=float(rng.uniform(0, 1)))
    base.update(kw)
    return ModelConfig(**base)


def jittered_model(rng, config, scale=0.5):
    model = AnchorNetT(config, seed=int(rng.integers(1 << 30)))
    for p in model.parameters():
        p.data = p.data + rng.normal(0.0, scale, p.shape)
    model.params["embed"].data[config.pad_index] = 0.0
    return model


# 1 ---------------------------------------------------------------------------

@criterion(1, "geometry reproduction", limit=1.0)
def test_geometry_reproduction():
    checks = []
    head = builtin_stack("anchornet-i-head").geometry()
    checks.append([h for h, _ in layer_sizes((224, 224), head)] == [111, 55, 27, 27, 27, 27, 27, 27, 25, 23])
    checks.append([compose(head[:i + 1]).rf[0] for i in range(len(head))] == [3, 7, 15, 15, 15, 15, 15, 15, 31, 47])
    branch_rfs = {63: [63, 63, 63], 95: [63, 95, 95], 111: [79, 111, 111]}
    for rf, grid in ((63, 21), (95, 17), (111, 15)):
        layers = builtin_stack(f"anchornet-i-b{rf}").geometry()
        tail = layers[len(head):]
        checks.append([compose(head + tail[:i + 1]).rf[0] for i in range(len(tail))] == branch_rfs[rf])
        s = compose(layers, (224, 224))
        checks.append(s.rf == (rf, rf) and s.jump == (8, 8) and s.out_size == (grid, grid))
        checks.append(patch_grid((224, 224), rf, 8) == (grid, grid))
        checks.append(grid * grid == {63: 441, 95: 289, 111: 225}[rf])
    for k, length in ((3, 57), (5, 55), (7, 53)):
        layers = builtin_stack(f"anchornet-t-b{k}").geometry()
        s = compose(layers, (1, 59))
        checks.append(s.rf == (1, k) and s.out_size == (1, length))
        checks.append(output_size(59, layers) == (1, length) and patch_grid(59, k, 1) == (1, length))
    return all(checks), f"{sum(checks)}/{len(checks)} table entries exact"


# 2 ---------------------------------------------------------------------------

@criterion(2, "mapping oracle", limit=30.0)
def test_mapping_oracle():
    rng = np.random.default_rng(2)
    mismatches, locations = 0, 0
    for _ in range(200):
        layers = [LayerGeom((int(rng.integers(1, 6)), int(rng.integers(1, 6))),
                            (int(rng.integers(1, 4)), int(rng.integers(1, 4))))
                  for _ in range(int(rng.integers(1, 6)))]
        s = compose(layers)
        size = tuple(int(s.rf[d] + s.jump[d] * rng.integers(0, 4) + rng.integers(0, s.jump[d])) for d in (0, 1))
        summary = compose(layers, size)
        for loc in itertools.product(range(summary.out_size[0]), range(summary.out_size[1])):
            locations += 1
            if map_location(loc, summary) != bounding_rect(traced_support(loc, layers, size)):
                mismatches += 1
    return mismatches == 0, f"{locations} locations on 200 stacks, {mismatches} mismatches"


# 3 ---------------------------------------------------------------------------

def grid_heatmap(values, rf, jump):
    H, W = values.shape
    geo = compose([LayerGeom((rf, rf), (jump, jump))], (rf + jump * (H - 1), rf + jump * (W - 1)))
    return Heatmap(values, geo)


def pairwise_iou(rects):
    r = np.array([[x.top, x.left, x.bottom, x.right] for x in rects])
    ih = np.clip(np.minimum(r[:, None, 2], r[None, :, 2]) - np.maximum(r[:, None, 0], r[None, :, 0]), 0, None)
    iw = np.clip(np.minimum(r[:, None, 3], r[None, :, 3]) - np.maximum(r[:, None, 1], r[None, :, 1]), 0, None)
    inter = ih * iw
    area = (r[:, 2] - r[:, 0]) * (r[:, 3] - r[:, 1])
    out = inter / (area[:, None] + area[None, :] - inter)
    np.fill_diagonal(out, 0.0)
    return out


@criterion(3, "LIP oracle equivalence and invariants", limit=60.0)
def test_lip_oracle_and_invariants():
    rng = np.random.default_rng(3)
    differ = 0
    for _ in range(1000):
        H, W = (int(v) for v in rng.integers(1, 6, 2))
        rf, jump = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        values = rng.permutation(H * W).reshape(H, W).astype(float)
        K, T, P = int(rng.integers(1, H * W + 1)), float(rng.uniform(0, 1)), float(rng.uniform(0.01, 1))
        got = [p.coord for p in lip(grid_heatmap(values, rf, jump), LipParams(K, T, P))]
        differ += got != lip_oracle(values, (rf, rf), (jump, jump), K, T, P)
    broken = 0
    for _ in range(10000):
        H, W = (int(v) for v in rng.integers(1, 33, 2))
        rf, jump = int(rng.integers(1, 16)), int(rng.integers(1, 9))
        hm = grid_heatmap(rng.normal(size=(H, W)), rf, jump)
        params = LipParams(int(rng.integers(1, 65)), float(rng.uniform(0, 1)), float(rng.uniform(0.01, 1)))
        ps = lip(hm, params)
        acts = [p.activation for p in ps]
        ok = (1 <= len(ps) <= params.K and ps.visited <= visit_budget(H * W, params.P)
              and acts[0] == hm.values.max() and acts == sorted(acts, reverse=True)
              and (len(ps) == 1 or pairwise_iou(ps.rects).max() < params.T))
        broken += not ok
    return differ == 0 and broken == 0, f"{differ}/1000 oracle mismatches, {broken}/10000 invariant breaks"


# 4 ---------------------------------------------------------------------------

@criterion(4, "attention and aggregation invariants")
def test_attention_invariants():
    rng = np.random.default_rng(4)
    worst, flips, forwards = 0.0, 0, 0
    while forwards < 1000:
        config = toy_config(rng)
        model = jittered_model(rng, config, scale=1.0)
        for _ in range(50):
            out = model.forward(rng.integers(config.vocab_size, size=config.seq_len))
            forwards += 1
            for b in out.branches:
                a = b.attention
                for t in (a.spatial_weights, a.channel_attention, a.spatial_attention, b.class_probs, b.aux_probs):
                    worst = max(worst, abs(float(t.data.sum()) - 1.0))
            b = out.branches[int(rng.integers(len(out.branches)))]
            F = b.class_map.data
            permuted = ad.softmax(ad.spatial_mean(Tensor(F[rng.permutation(F.shape[0])]))).data
            flips += int(np.argmax(permuted) != np.argmax(b.class_probs.data))
    ok = worst <= 1e-9 and flips == 0
    return ok, f"max |sum - 1| = {worst:.1e} over {forwards} forwards, {flips} permutation flips"


# 5 ---------------------------------------------------------------------------

@criterion(5, "gradient correctness", limit=120.0)
def test_gradient_correctness():
    rng = np.random.default_rng(5)
    errors = []
    for _ in range(20):
        config = toy_config(rng)
        model = jittered_model(rng, config, scale=0.3)
        tokens = rng.integers(config.pad_index + 1, config.vocab_size, size=(2, config.seq_len))
        labels = rng.integers(config.num_classes, size=2)
        errors.append(grad_check(lambda: model.loss(tokens, labels), model.parameters()))
    return max(errors) < 1e-4, f"max relative error {max(errors):.2e} over 20 configurations (all coordinates)"


# 6 ---------------------------------------------------------------------------

@pytest.mark.slow
@criterion(6, "desk-scale training", limit=600.0)
def test_desk_scale_training(trained, planted):
    model, result, seconds = trained
    corpus = planted.corpus
    x_val, y_val = corpus.encode("val", model.config.seq_len)
    acc = accuracy_by_branch(model, x_val, y_val)
    records = run_localize(model, corpus, "val")
    inside = [r.span[0] <= planted.positions[r.doc] and planted.positions[r.doc] + 3 <= r.span[1] for r in records]
    contained = float(np.mean(inside))
    ok = min(acc) >= 0.95 and contained >= 0.90 and len(result.log) <= 30 and seconds < 600
    detail = (f"val accuracy per branch {[round(a, 3) for a in acc]}, {contained:.3f} of top-1 spans contain "
              f"the trigram, best epoch {result.best_epoch}/{len(result.log)}, training {seconds:.0f} s")
    return ok, detail


# 7 ---------------------------------------------------------------------------

@criterion(7, "FLOPs ratios", limit=5.0)
def test_flops_ratios():
    target, target_overall = (0.46, 0.54, 0.54), 0.51
    stack = builtin_stack("resnet50")
    readings = []
    for include, upstream in ((False, 0.0), (True, 0.5e9)):
        r = pipeline_ratio(stack, (224, 224), REFERENCE_STATS["image"], include, upstream)
        close = (all(abs(a - b) <= 0.10 for a, b in zip(r.branch_ratios, target))
                 and abs(r.overall - target_overall) <= 0.10)
        readings.append((close, r))
    image_ok = any(close for close, _ in readings)
    text = pipeline_ratio(builtin_stack("kim-cnn"), (1, 59), REFERENCE_STATS["text"])
    text_ok = text.overall < 0.15 and abs(text.overall - 0.07) <= 0.08
    best = next((r for close, r in readings if close), readings[0][1])
    detail = (f"image {[round(x, 2) for x in best.branch_ratios]} overall {best.overall:.2f}, "
              f"text overall {text.overall:.3f}")
    return image_ok and text_ok, detail


# 8 ---------------------------------------------------------------------------

@pytest.mark.slow
@criterion(8, "FGSM property", limit=60.0)
def test_fgsm_property(trained, planted):
    model = trained[0]
    tokens, labels = planted.corpus.encode("val", model.config.seq_len)
    tokens, labels = tokens[:500], labels[:500]
    zero = fgsm_eval(model, tokens, labels, 0.0)
    attack = fgsm_eval(model, tokens, labels, 0.2)
    exact = zero.adversarial_loss == zero.clean_loss and zero.adversarial_accuracy == zero.clean_accuracy
    ok = exact and attack.adversarial_loss > attack.clean_loss and attack.adversarial_accuracy < attack.clean_accuracy
    detail = (f"eps 0.2 loss {attack.clean_loss:.4f} -> {attack.adversarial_loss:.4f}, accuracy "
              f"{attack.clean_accuracy:.3f} -> {attack.adversarial_accuracy:.3f}; eps 0 bit-exact {exact}")
    return ok, detail


# 9 ---------------------------------------------------------------------------

@criterion(9, "serialization")
def test_serialization():
    rng = np.random.default_rng(9)
    exact = 0
    for i in range(100):
        model = jittered_model(rng, toy_config(rng))
        vocab = {f"t{j}": j for j in range(model.config.vocab_size)}
        data = checkpoint_bytes(Checkpoint.from_model(model, vocab, {"trial": i}))
        ckpt = checkpoint_from_bytes(data)
        rebuilt = ckpt.build()
        same = (checkpoint_bytes(ckpt) == data and ckpt.vocab == vocab and rebuilt.config == model.config
                and all(np.array_equal(rebuilt.params[n].data, p.data) for n, p in model.params.items()))
        exact += same

    def rejected(blob, kind):
        try:
            checkpoint_from_bytes(blob)
        except CheckpointError as exc:
            return type(exc) is kind and exc.exit_code == 2
        return False

    _, _, head_len = _PREFIX.unpack_from(data)
    flipped = bytearray(data)
    flipped[-40] ^= 0x01
    cases = {
        "truncated": rejected(data[:-1], ChecksumError),
        "bit flip": rejected(bytes(flipped), ChecksumError),
        "bad magic": rejected(b"X" * len(MAGIC) + data[len(MAGIC):], CheckpointError),
        "future version": rejected(_PREFIX.pack(MAGIC, 2, head_len) + data[_PREFIX.size:], VersionMismatch),
    }
    ok = exact == 100 and all(cases.values())
    return ok, f"{exact}/100 bit-exact round trips, corruption cases {cases}"
