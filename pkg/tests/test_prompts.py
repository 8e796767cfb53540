import numpy as np
import pytest
import torch

from artifactdet.prompts import (AnchorSet, PromptError, anchor_separation_report, build_prompts,
                                 encode_anchor_set, injection_schedule)

NAMES = ["ghosting", "lens flare", "moire"]


def test_prompt_structure(backbone):
    bank = build_prompts(backbone, NAMES, L=4, seed=0)
    lengths = bank.sequence_lengths()
    assert len(lengths) == 4
    for k, name in enumerate(NAMES, start=1):
        assert lengths[k] - lengths[0] == len(backbone.tokenizer.encode(name))
    assert bank.learnable_clean.shape == (4, 16) and bank.learnable_artifact.shape == (3, 4, 16)


def test_prompt_layout_order(backbone):
    bank = build_prompts(backbone, NAMES, L=2, seed=0)
    seqs, eot = bank.assemble(backbone, prefix=1)
    emb = backbone.text.token_embedding.weight
    tok = backbone.tokenizer
    cls = tok.encode("a photo of an object")
    row = seqs[3]
    assert torch.equal(row[1], emb[tok.sot_id])
    assert torch.equal(row[2:4], bank.learnable_artifact[2])
    assert torch.equal(row[4:4 + len(cls)], emb[cls])
    assert torch.equal(row[4 + len(cls)], emb[tok.encode("moire")[0]])
    assert torch.equal(row[int(eot[3])], emb[tok.eot_id])


def test_same_seed_same_init(backbone):
    a, b = build_prompts(backbone, NAMES, L=4, seed=5), build_prompts(backbone, NAMES, L=4, seed=5)
    assert torch.equal(a.learnable_artifact, b.learnable_artifact)
    std = torch.cat([a.learnable_clean.flatten(), a.learnable_artifact.flatten()]).std()
    assert 0.01 < float(std.detach()) < 0.03


def test_overflow(backbone):
    with pytest.raises(PromptError):
        build_prompts(backbone, NAMES, L=30)
    bank = build_prompts(backbone, NAMES, L=20)
    with pytest.raises(PromptError):
        bank.check_fits(prefix=8)


def test_schedule(backbone):
    empty = injection_schedule(backbone, J=0, depth=3)
    assert empty.injections() == {}
    s = injection_schedule(backbone, J=4, depth=3, seed=0)
    inj = s.injections()
    assert sorted(inj) == [1, 2, 3] and all(g.shape == (4, 16) for g in inj.values())
    with torch.no_grad():
        before = inj[2].clone()
        s.tokens["1"].add_(1.0)
    assert torch.equal(s.injections()[2], before)
    with pytest.raises(PromptError):
        injection_schedule(backbone, J=32, depth=2)
    with pytest.raises(PromptError):
        injection_schedule(backbone, J=2, depth=5)


def test_nine_layer_schedule():
    from artifactdet.backbone import make_toy_backbone
    bb = make_toy_backbone(layers=2, text_layers=12)
    s = injection_schedule(bb, J=4, depth=9)
    assert s.designated_layers == list(range(1, 10))
    assert len({id(g) for g in s.injections().values()}) == 9


def test_anchor_set_contract(backbone):
    bank = build_prompts(backbone, NAMES, L=4, seed=0)
    sched = injection_schedule(backbone, J=2, depth=3, seed=1)
    a = encode_anchor_set(bank, sched, backbone).anchors
    b = encode_anchor_set(bank, sched, backbone).anchors
    assert a.shape == (4, 8) and torch.equal(a, b)
    assert torch.allclose(a.norm(dim=1), torch.ones(4), atol=1e-6)


def test_stage_two_step_moves_anchors_only(backbone):
    bank = build_prompts(backbone, NAMES, L=4, seed=0)
    sched = injection_schedule(backbone, J=2, depth=3, seed=1)
    ck = backbone.checksum()
    before = encode_anchor_set(bank, sched, backbone).anchors.detach().clone()
    opt = torch.optim.Adam([*bank.parameters(), *sched.parameters()], lr=1e-2)
    loss = encode_anchor_set(bank, sched, backbone).anchors[0] @ encode_anchor_set(bank, sched, backbone).anchors[1]
    loss.backward()
    opt.step()
    assert not torch.equal(encode_anchor_set(bank, sched, backbone).anchors, before)
    assert backbone.checksum() == ck


def test_word_embedding_gradients_reach_every_prompt(backbone):
    bank = build_prompts(backbone, NAMES, L=4, seed=0)
    sched = injection_schedule(backbone, J=2, depth=3, seed=1)
    target = torch.randn(4, 8, generator=torch.Generator().manual_seed(0))
    (encode_anchor_set(bank, sched, backbone).anchors * target).sum().backward()
    assert bank.learnable_clean.grad.abs().sum() > 0
    assert all(bank.learnable_artifact.grad[k].abs().sum() > 0 for k in range(3))
    assert all(sched.tokens[h].grad.abs().sum() > 0 for h in ("1", "2", "3"))


def test_separation_report_examples():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 8))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    anchors = AnchorSet(torch.tensor(a))
    rep = anchor_separation_report(anchors, anchors)
    assert rep["before"] == rep["after"]
    cos = a @ a.T
    assert rep["before"]["clean_vs_artifact_mean"] == pytest.approx(cos[0, 1:].mean(), abs=1e-12)
    assert rep["before"]["artifact_pairwise"]["1-3"] == pytest.approx(cos[1, 3], abs=1e-12)
    ortho = anchor_separation_report(anchors, AnchorSet(torch.eye(4, 8, dtype=torch.float64)))
    assert ortho["after"]["clean_vs_artifact_mean"] == 0.0
    with pytest.raises(PromptError):
        anchor_separation_report(anchors, AnchorSet(torch.eye(3, 8)))
