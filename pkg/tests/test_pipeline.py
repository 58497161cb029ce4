import json
import warnings

import numpy as np
import pytest
import torch

from mde_edit.backend_toy.scenes import random_scene
from mde_edit.core import AlignmentOutOfRange, EditSpec, GuidanceConfig, MDEError
from mde_edit.inversion import ddim_invert, nti_optimize
from mde_edit.pipeline import (
    EditSession,
    dual_branch_step,
    edit,
    mask_to_latent,
    masked_update,
    mde_optimize,
)

STEPS = 6


@pytest.fixture(scope="module")
def setup(tiny_backend):
    scene = random_scene(np.random.default_rng(7), 2, colors=("red", "blue"), kinds=("circle", "square"))
    src = scene.caption
    tgt = src.replace("red", "green").replace("square", "triangle")
    ids = tiny_backend.ids(src)
    traj = nti_optimize(tiny_backend, ddim_invert(tiny_backend, scene.render(), ids, STEPS), ids, inner_steps=2)
    tgt_ids = tiny_backend.ids(tgt)
    v = tiny_backend.vocabulary
    specs = []
    for k, shape in enumerate(scene.shapes):
        pos = 2 + 4 * k if shape.color == "red" else 3 + 4 * k
        assert v.word(tgt_ids[pos]) in ("green", "triangle")
        specs.append(EditSpec(scene.masks[k], (pos,), v.word(tgt_ids[pos])))
    return scene, src, tgt, traj, specs


def cfg(**kw):
    base = dict(total_steps=STEPS, opt_window=3, delta=0.5)
    base.update(kw)
    return GuidanceConfig(**base)


def test_mask_to_latent_nearest():
    m = np.zeros((4, 4), np.uint8)
    m[:2, :2] = 1
    assert np.array_equal(mask_to_latent(m, (2, 2)), [[1, 0], [0, 0]])
    assert mask_to_latent(m, (4, 4)) is not m


def test_masked_update_bit_exact():
    z = torch.randn(3, 5, 5, dtype=torch.float32)
    g = torch.randn(3, 5, 5, dtype=torch.float32)
    m = (torch.rand(1, 5, 5) > 0.5).float()
    out = masked_update(z, g, m, 0.1)
    keep = (m == 0).expand_as(z)
    assert torch.equal(out[keep], z[keep])
    torch.testing.assert_close(out[~keep], (z - 0.1 * g)[~keep])


def test_window_and_masked_merge(tiny_backend, setup, monkeypatch):
    import mde_edit.pipeline as pl

    scene, src, tgt, traj, specs = setup
    checks = []
    real = pl.mde_optimize

    def spy(session, s, z):
        out = real(session, s, z)
        keep = (session.union_t == 0).expand_as(z)
        checks.append((s, torch.equal(out[keep], z[keep]), not torch.equal(out, z)))
        return out

    monkeypatch.setattr(pl, "mde_optimize", spy)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = edit(tiny_backend, scene.render(), src, tgt, specs, cfg(inner_iters=2), traj)
    assert res.session.call_log == [0, 0, 1, 1, 2, 2]
    assert [c[0] for c in checks] == [0, 1, 2]
    assert all(c[1] and c[2] for c in checks)
    with pytest.raises(MDEError):
        real(res.session, 3, res.z0_edit.data)


def test_edit_runs_and_logs(tiny_backend, setup, tmp_path):
    scene, src, tgt, traj, specs = setup
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = edit(tiny_backend, scene.render(), src, tgt, specs, cfg(), traj, tmp_path / "dbg")
    assert res.image.shape == (3, 32, 32)
    lines = res.losses_jsonl().splitlines()
    assert [json.loads(l)["step"] for l in lines] == [0, 1, 2]
    assert res.session.recorder.steps("editing") == list(range(STEPS))
    assert (tmp_path / "dbg" / "attn" / "step_000").is_dir()
    assert res.union_mask.sum() == (scene.masks[0] | scene.masks[1]).sum()


def test_loss_free_settings_skip_optimization(tiny_backend, setup):
    scene, src, tgt, traj, specs = setup
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = edit(tiny_backend, scene.render(), src, tgt, specs, cfg(lambda1=0, lambda2=0), traj)
    assert res.session.call_log == []


def test_identical_prompt_edit_reproduces_reconstruction(tiny_backend, setup):
    scene, src, _, traj, _ = setup
    res = edit(tiny_backend, scene.render(), src, src, [], cfg(), traj)
    assert torch.equal(res.z0_edit.data, res.z0_recon.data)


def test_injection_sets_shared_columns(tiny_backend, setup):
    scene, src, tgt, traj, specs = setup
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = edit(tiny_backend, scene.render(), src, tgt, specs, cfg(opt_window=0), traj)
    rec = res.session.recorder
    al = res.session.alignment
    for s in range(STEPS):
        for a, b in zip(rec.get("reconstruction", s).maps, rec.get("editing", s).maps):
            for i, j in al.shared:
                assert torch.equal(b[..., j], a[..., i])


def test_edit_token_must_be_new(tiny_backend, setup):
    scene, src, tgt, traj, specs = setup
    bad = [EditSpec(scene.masks[0], (1,), "a")]
    with pytest.raises(AlignmentOutOfRange):
        EditSession.create(tiny_backend, traj, src, tgt, bad, cfg())


def test_trajectory_length_must_match(tiny_backend, setup):
    scene, src, tgt, traj, specs = setup
    with pytest.raises(MDEError):
        edit(tiny_backend, scene.render(), src, tgt, specs, GuidanceConfig(), traj)


def test_masked_update_hand_example():
    z = torch.tensor([1.0, 2.0], dtype=torch.float64)
    out = masked_update(z, torch.tensor([0.5, 0.5], dtype=torch.float64), torch.tensor([1.0, 0.0]), 0.1)
    assert out.tolist() == [0.95, 2.0]
    assert torch.equal(masked_update(z, torch.ones(2, dtype=torch.float64), torch.zeros(2), 0.1), z)


def test_disabled_editing_equals_plain_sampling(tiny_backend, setup):
    from mde_edit.backend_toy.sampling import ddim_sample

    scene, src, tgt, traj, specs = setup
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        off = cfg(lambda1=0, lambda2=0, inject=False, merge_background=False)
        res = edit(tiny_backend, scene.render(), src, tgt, specs, off, traj)
    plain = ddim_sample(tiny_backend, traj.z_T, tiny_backend.ids(tgt), STEPS, 3.0, null_embeddings=traj.null_embeddings)
    assert torch.equal(res.z0_edit.data, plain.data)


def test_edit_is_deterministic(tiny_backend, setup):
    scene, src, tgt, traj, specs = setup
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = edit(tiny_backend, scene.render(), src, tgt, specs, cfg(), traj)
        b = edit(tiny_backend, scene.render(), src, tgt, specs, cfg(), traj)
    assert torch.equal(a.z0_edit.data, b.z0_edit.data)


def test_background_merge_copies_reconstruction_outside_masks(tiny_backend, setup):
    scene, src, tgt, traj, specs = setup
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        merged = edit(tiny_backend, scene.render(), src, tgt, specs, cfg(), traj)
        free = edit(tiny_backend, scene.render(), src, tgt, specs, cfg(merge_background=False), traj)
    out = torch.as_tensor(merged.union_mask == 0).expand_as(merged.z0_edit.data)
    assert torch.equal(merged.z0_edit.data[out], merged.z0_recon.data[out])
    assert not torch.equal(free.z0_edit.data[out], free.z0_recon.data[out])
