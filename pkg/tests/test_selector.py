import math

import numpy as np
import pytest
import torch

from conftest import DIM, figure_sample
from src.config import SelectorConfig
from src.errors import DataError, ExhaustedCandidatesError
from src.selector import (
    KnowledgeSelector,
    SelectorBatch,
    SelectorForward,
    SelectorModel,
    cls_loss,
    seq_loss,
    step_available,
    total_loss,
)


def _selector(seed=0, **overrides):
    torch.manual_seed(seed)
    params = dict(d=16, n_layers=2, n_heads=2, dropout=0.0)
    params.update(overrides)
    return KnowledgeSelector(SelectorConfig(**params)).eval()


def _batch(M=5, d=16, gold=(2, 0, 4), dtype=torch.float32, seed=0):
    g = torch.Generator().manual_seed(seed)
    X = torch.randn(1, M, d, generator=g, dtype=dtype)
    x_a = torch.randn(1, d, generator=g, dtype=dtype)
    labels = torch.zeros(1, M, dtype=torch.long)
    labels[0, list(gold)] = 1
    return SelectorBatch(
        X=X,
        mask=torch.ones(1, M, dtype=torch.bool),
        x_a=x_a,
        gold=torch.tensor([list(gold)]),
        labels=labels,
    )


def _forward_from_scores(scores, gold, mask=None):
    """用给定的打分构造前向结果，scores [B, K, M]"""
    B, K, M = scores.shape
    mask = torch.ones(B, M, dtype=torch.bool) if mask is None else mask
    available = step_available(mask, gold, M)
    logits = scores.masked_fill(~available, float("-inf"))
    dummy = torch.zeros(1)
    return SelectorForward(
        H=dummy, Z=None, K_tilde=dummy, E=dummy, logits=logits, available=available
    )


class TestClassifier:
    def test_rows_sum_to_one(self):
        selector = _selector()
        batch = _batch()
        H = selector.encode_context(batch.X, batch.mask, batch.x_a)
        Z = selector.classify_sentences(H, batch.x_a)
        assert Z.shape == (1, 5, 2)
        assert torch.allclose(Z.sum(-1), torch.ones(1, 5))

    def test_zero_head_is_uniform(self):
        selector = _selector()
        torch.nn.init.zeros_(selector.classifier.weight)
        torch.nn.init.zeros_(selector.classifier.bias)
        batch = _batch()
        H = selector.encode_context(batch.X, batch.mask, batch.x_a)
        Z = selector.classify_sentences(H, batch.x_a)
        assert torch.allclose(Z, torch.full_like(Z, 0.5))

    def test_pre_concat_variant(self):
        selector = _selector(concat="pre")
        batch = _batch()
        H = selector.encode_context(batch.X, batch.mask, batch.x_a)
        assert selector.classify_sentences(H, batch.x_a).shape == (1, 5, 2)


class TestInfuseKeys:
    def test_zero_projection_is_identity(self):
        selector = _selector()
        torch.nn.init.zeros_(selector.key_infusion.weight)
        H = torch.randn(1, 4, 16)
        Z = torch.softmax(torch.randn(1, 4, 2), dim=-1)
        assert torch.equal(selector.infuse_keys(H, Z), H)

    def test_positive_rows_add_second_row(self):
        selector = _selector()
        H = torch.randn(1, 3, 16)
        Z = torch.tensor([[[0.0, 1.0]] * 3])
        v = selector.key_infusion.weight[:, 1]
        assert torch.allclose(selector.infuse_keys(H, Z), H + v)

    def test_matches_matrix_oracle(self):
        selector = _selector(seed=4).double()
        rng = np.random.default_rng(0)
        H = rng.normal(size=(1, 6, 16))
        z = rng.uniform(size=(1, 6))
        Z = np.stack([1 - z, z], axis=-1)
        W = selector.key_infusion.weight.detach().numpy().T  # [2, d]
        expected = H + Z @ W
        got = selector.infuse_keys(torch.from_numpy(H), torch.from_numpy(Z)).detach().numpy()
        assert np.allclose(got, expected, atol=1e-6)

    def test_none_infusion_matches_zero_projection(self):
        keyed = _selector(seed=2)
        torch.nn.init.zeros_(keyed.key_infusion.weight)
        plain = _selector(seed=2, infusion="none")
        plain.load_state_dict(keyed.state_dict())
        batch = _batch()
        assert torch.allclose(keyed(batch).logits, plain(batch).logits)


class TestDecodePrefix:
    def _context(self, selector, batch):
        H = selector.encode_context(batch.X, batch.mask, batch.x_a)
        Z = selector.classify_sentences(H, batch.x_a)
        return H, selector.infuse_keys(H, Z)

    def test_causal_mask(self):
        selector = _selector().double()
        batch = _batch(dtype=torch.float64)
        H, K = self._context(selector, batch)
        prefix = torch.cat([batch.x_a.unsqueeze(1), batch.X[:, [2, 0, 4]]], dim=1)
        perturbed = prefix.clone()
        perturbed[:, 3] += 5.0
        a = selector.decode_prefix(prefix, H, K, batch.mask)
        b = selector.decode_prefix(perturbed, H, K, batch.mask)
        torch.testing.assert_close(a[:, :3], b[:, :3], rtol=0, atol=1e-12)
        assert not torch.allclose(a[:, 3], b[:, 3])

    def test_appending_changes_last_output(self):
        selector = _selector()
        batch = _batch()
        H, K = self._context(selector, batch)
        first = selector.decode_prefix(batch.x_a.unsqueeze(1), H, K, batch.mask)[:, -1]
        prefix = torch.cat([batch.x_a.unsqueeze(1), batch.X[:, [1]]], dim=1)
        second = selector.decode_prefix(prefix, H, K, batch.mask)[:, -1]
        assert not torch.allclose(first, second)


class TestSelectionDistribution:
    def _selector_2d(self):
        return KnowledgeSelector(SelectorConfig(d=2, n_heads=1, n_layers=1, dropout=0.0))

    def test_equal_scores(self):
        selector = self._selector_2d()
        X = torch.tensor([[[1.0, 0.0], [1.0, 0.0]]])
        available = torch.ones(1, 2, dtype=torch.bool)
        probs = selector.selection_distribution(torch.tensor([[0.0, 1.0]]), X, available)
        assert torch.allclose(probs, torch.tensor([[0.5, 0.5]]))

    def test_selected_sentence_gets_zero(self):
        selector = self._selector_2d()
        X = torch.tensor([[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]])
        available = torch.tensor([[True, False, True]])
        probs = selector.selection_distribution(torch.tensor([[1.0, 0.5]]), X, available)
        assert probs[0, 1].item() == 0.0
        assert probs.sum().item() == pytest.approx(1.0, abs=1e-6)

    def test_cosine_softmax_oracle(self):
        selector = self._selector_2d()
        X = torch.tensor([[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]])
        probs = selector.selection_distribution(
            torch.tensor([[2.0, 0.0]]), X, torch.ones(1, 3, dtype=torch.bool)
        )
        expected = np.exp([1.0, 0.0, -1.0]) / np.exp([1.0, 0.0, -1.0]).sum()
        assert np.allclose(probs[0].numpy(), expected, atol=1e-6)
        assert np.allclose(expected, [0.665, 0.245, 0.090], atol=1e-3)

    def test_exhausted(self):
        selector = self._selector_2d()
        X = torch.ones(1, 2, 2)
        with pytest.raises(ExhaustedCandidatesError):
            selector.selection_distribution(
                torch.ones(1, 2), X, torch.zeros(1, 2, dtype=torch.bool)
            )

    def test_distribution_sums_to_one_over_steps(self):
        selector = _selector()
        batch = _batch()
        state = selector.prepare_context(batch.X[0], batch.x_a[0])
        selected = []
        for _ in range(4):
            probs = selector.step_distribution(state, selected)
            assert probs.sum().item() == pytest.approx(1.0, abs=1e-5)
            assert all(probs[i].item() == 0.0 for i in selected)
            selected.append(int(torch.argmax(probs)))


class TestSeqLoss:
    def test_single_certain_candidate_is_zero(self):
        forward = _forward_from_scores(torch.tensor([[[0.3]]]), torch.tensor([[0]]))
        loss = seq_loss(forward, torch.tensor([[0]]), SelectorConfig(d=16, n_heads=2))
        assert loss.item() == pytest.approx(0.0, abs=1e-7)

    def test_include_positive_oracle(self):
        scores = torch.tensor([[[0.2, -0.4, 1.1], [0.7, 0.1, -0.3]]], dtype=torch.float64)
        gold = torch.tensor([[2, 0]])
        loss = seq_loss(_forward_from_scores(scores, gold), gold, SelectorConfig(d=16, n_heads=2))
        s0, s1 = scores[0, 0].tolist(), scores[0, 1].tolist()
        step0 = -s0[2] + math.log(sum(math.exp(v) for v in s0))
        step1 = -s1[0] + math.log(math.exp(s1[0]) + math.exp(s1[1]))
        assert loss.item() == pytest.approx((step0 + step1) / 2, abs=1e-6)

    def test_exclude_positive_oracle(self):
        scores = torch.tensor([[[0.2, -0.4, 1.1], [0.7, 0.1, -0.3]]], dtype=torch.float64)
        gold = torch.tensor([[2, 0]])
        config = SelectorConfig(d=16, n_heads=2, denominator="exclude-positive")
        loss = seq_loss(_forward_from_scores(scores, gold), gold, config)
        s0, s1 = scores[0, 0].tolist(), scores[0, 1].tolist()
        step0 = -s0[2] + math.log(math.exp(s0[0]) + math.exp(s0[1]))
        step1 = -s1[0] + s1[1]
        assert loss.item() == pytest.approx((step0 + step1) / 2, abs=1e-6)

    def test_raising_positive_lowers_loss(self):
        gold = torch.tensor([[1]])
        config = SelectorConfig(d=16, n_heads=2)
        low = seq_loss(_forward_from_scores(torch.tensor([[[0.5, 0.1, 0.2]]]), gold), gold, config)
        high = seq_loss(_forward_from_scores(torch.tensor([[[0.5, 0.9, 0.2]]]), gold), gold, config)
        assert high.item() < low.item()

    def test_gold_outside_context(self):
        gold = torch.tensor([[2]])
        mask = torch.tensor([[True, True, False]])
        forward = _forward_from_scores(torch.zeros(1, 1, 3), gold, mask)
        with pytest.raises(DataError):
            seq_loss(forward, gold, SelectorConfig(d=16, n_heads=2))

    def test_padded_steps_are_ignored(self):
        config = SelectorConfig(d=16, n_heads=2)
        scores = torch.tensor([[[0.2, 0.5, 0.1], [0.3, 0.3, 0.3]]])
        padded = torch.tensor([[1, -1]])
        single = torch.tensor([[1]])
        a = seq_loss(_forward_from_scores(scores, padded), padded, config)
        b = seq_loss(_forward_from_scores(scores[:, :1], single), single, config)
        assert a.item() == pytest.approx(b.item(), abs=1e-7)


class TestClsLoss:
    def test_perfect_predictions(self):
        Z = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])
        assert cls_loss(Z, torch.tensor([[0, 1]])).item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_is_ln2(self):
        Z = torch.full((1, 4, 2), 0.5)
        assert cls_loss(Z, torch.tensor([[0, 1, 1, 0]])).item() == pytest.approx(math.log(2))

    def test_random_oracle(self):
        rng = np.random.default_rng(1)
        z = rng.uniform(0.05, 0.95, size=5)
        labels = np.array([1, 0, 0, 1, 0])
        Z = torch.from_numpy(np.stack([1 - z, z], axis=-1)[None])
        expected = -np.mean(np.where(labels == 1, np.log(z), np.log(1 - z)))
        got = cls_loss(Z, torch.from_numpy(labels)[None]).item()
        assert got == pytest.approx(expected, abs=1e-6)

    def test_mask_excludes_padding(self):
        Z = torch.tensor([[[0.5, 0.5], [0.0, 1.0]]])
        mask = torch.tensor([[False, True]])
        assert cls_loss(Z, torch.tensor([[0, 1]]), mask).item() == pytest.approx(0.0, abs=1e-6)


class TestTotalLoss:
    @pytest.mark.parametrize(
        "cls, seq, lam, expected",
        [(1.0, 2.0, 1.0, 3.0), (1.0, 2.0, 0.5, 2.0), (0.0, 4.0, 0.25, 1.0)],
    )
    def test_weighted_sum(self, cls, seq, lam, expected):
        assert total_loss(cls, seq, lam) == expected

    def test_decomposition(self):
        rng = np.random.default_rng(2)
        for c, s, lam in rng.uniform(0, 3, size=(20, 3)):
            assert total_loss(c, s, lam) - total_loss(c, 0.0, lam) == pytest.approx(lam * s)

    def test_zero_lambda_zeroes_decoder_gradients(self):
        selector = _selector().train()
        forward = selector(_batch())
        batch = _batch()
        loss = total_loss(
            cls_loss(forward.Z, batch.labels), seq_loss(forward, batch.gold, selector.config), 0.0
        )
        loss.backward()
        decoder_params = list(selector.decoder_layers.parameters()) + list(
            selector.prefix_positions.parameters()
        )
        for p in decoder_params:
            assert p.grad is None or torch.count_nonzero(p.grad) == 0
        assert torch.count_nonzero(selector.classifier.weight.grad) > 0


def test_gradcheck_total_loss():
    selector = _selector(seed=7).double()
    batch = _batch(dtype=torch.float64, seed=3)

    def objective(X, x_a):
        b = SelectorBatch(X=X, mask=batch.mask, x_a=x_a, gold=batch.gold, labels=batch.labels)
        forward = selector(b)
        return total_loss(
            cls_loss(forward.Z, b.labels, b.mask), seq_loss(forward, b.gold, selector.config), 1.0
        )

    X = batch.X.clone().requires_grad_(True)
    x_a = batch.x_a.clone().requires_grad_(True)
    assert torch.autograd.gradcheck(objective, (X, x_a), eps=1e-6, atol=1e-5, rtol=1e-4)


def test_context_limits():
    selector = _selector(max_sentences=4)
    batch = _batch(M=5)
    with pytest.raises(DataError):
        selector.encode_context(batch.X, batch.mask, batch.x_a)
    state = selector.prepare_context(batch.X[0], batch.x_a[0])
    assert state.truncated and state.num_sentences == 4


class TestContextEncoder:
    def test_single_sentence(self):
        selector = _selector()
        batch = _batch(M=1, gold=(0,))
        H = selector.encode_context(batch.X, batch.mask, batch.x_a)
        assert H.shape == (1, 1, 16)
        forward = selector(batch)
        assert forward.logits.shape == (1, 1, 1)
        assert seq_loss(forward, batch.gold, selector.config).item() == pytest.approx(0.0)

    def test_padding_rows_do_not_change_real_rows(self):
        selector = _selector()
        batch = _batch()
        junk = torch.randn(1, 3, 16, generator=torch.Generator().manual_seed(9))
        padded = SelectorBatch(
            X=torch.cat([batch.X, junk], dim=1),
            mask=torch.cat([batch.mask, torch.zeros(1, 3, dtype=torch.bool)], dim=1),
            x_a=batch.x_a,
            gold=batch.gold,
            labels=torch.cat([batch.labels, torch.zeros(1, 3, dtype=torch.long)], dim=1),
        )
        with torch.no_grad():
            plain, wide = selector(batch), selector(padded)
        torch.testing.assert_close(wide.H[:, :5], plain.H, atol=1e-5, rtol=1e-5)
        torch.testing.assert_close(wide.logits[..., :5], plain.logits, atol=1e-5, rtol=1e-5)
        assert torch.isinf(wide.logits[..., 5:]).all()

    def test_permutation_equivariant_without_positions(self):
        selector = _selector(positional=False)
        batch = _batch()
        perm = torch.tensor([3, 0, 4, 1, 2])
        with torch.no_grad():
            H = selector.encode_context(batch.X, batch.mask, batch.x_a)
            H_perm = selector.encode_context(batch.X[:, perm], batch.mask, batch.x_a)
        torch.testing.assert_close(H_perm, H[:, perm], atol=1e-5, rtol=1e-5)

    def test_positions_break_permutation_equivariance(self):
        selector = _selector(positional=True)
        batch = _batch()
        perm = torch.tensor([3, 0, 4, 1, 2])
        with torch.no_grad():
            H = selector.encode_context(batch.X, batch.mask, batch.x_a)
            H_perm = selector.encode_context(batch.X[:, perm], batch.mask, batch.x_a)
        assert not torch.allclose(H_perm, H[:, perm], atol=1e-3)


def test_decoder_only_has_no_classifier():
    selector = _selector(architecture="decoder-only")
    forward = selector(_batch())
    assert forward.Z is None
    assert torch.equal(forward.K_tilde, forward.H)
    assert cls_loss(forward.Z, _batch().labels).item() == 0.0


def test_model_bundle_roundtrip(tmp_path, hashing_spec, tiny_config):
    from src.encoder import load_encoder

    torch.manual_seed(0)
    model = SelectorModel(KnowledgeSelector(tiny_config), load_encoder(hashing_spec), hashing_spec)
    model.metadata = {"best_epoch": 1}
    model.save(tmp_path / "ckpt")
    loaded = SelectorModel.load(tmp_path / "ckpt")

    sample = figure_sample()
    assert loaded.metadata == {"best_epoch": 1}
    assert loaded.config == tiny_config
    assert np.allclose(loaded.predict_proba(sample), model.predict_proba(sample))
    assert loaded.predict_proba(sample).shape == (sample.num_sentences,)
    assert DIM == loaded.encoder_spec.d
