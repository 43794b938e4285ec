"""Veracity model: evidence assembly, forward contracts, losses, weights."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from verifact.attention import GateStrategy
from verifact.corpus import Claim, Document
from verifact.encoder import Vocabulary
from verifact.model import (
    ClassWeights,
    EvidenceSet,
    EvidenceSentence,
    ModelConfig,
    Verdict,
    VerifierParams,
    build_evidence_set,
    compute_class_weights,
    forward,
    joint_loss,
    predict_label,
    prediction_loss,
    read_verdicts,
    true_evidence_list,
    write_verdicts,
)
from verifact.selection import Mlp, RankedSentence
from verifact.tensor import ContractError, Tensor, grad_check

TABLE_COUNTS = {"S": 80035, "R": 29775, "N": 35659}


def zero_mlp(d_in, d_out):
    z = lambda *shape: Tensor(np.zeros(shape), requires_grad=True)
    return Mlp(w1=z(d_in, d_in), b1=z(d_in), w2=z(d_in, d_out), b2=z(d_out))


def tiny_docs():
    return {
        "T_Doc": Document("T_Doc", [f"true sentence {i} of record." for i in range(3)]),
        "P_Doc": Document("P_Doc", [f"predicted sentence {i} here." for i in range(5)]),
    }


def tiny_model(seed=0, dropout=0.0, std=0.02, **cfg_kw):
    docs = tiny_docs()
    texts = [s for d in docs.values() for s in d.sentences]
    texts += ["a plain claim about the record", "another claim entirely"]
    vocab = Vocabulary.build(texts)
    cfg = ModelConfig(width=8, n_heads=2, depth=1, max_len=16, max_sentences=5,
                      dropout=dropout, **cfg_kw)
    params = VerifierParams.create(cfg, vocab, np.random.default_rng(seed), std=std)
    return docs, cfg, params


def training_set(docs, claim=None, n_sent=3):
    claim = claim or Claim(5, "a plain claim about the record", "S", [[("T_Doc", 0)]])
    predicted = [RankedSentence("P_Doc", i, 0.9 - 0.1 * i) for i in range(n_sent - 1)]
    return build_evidence_set(claim, predicted, docs, m=5, training=True)


class TestEvidenceAssembly:
    def test_worked_example_train_mode(self):
        # true [t1, t2] + predicted [p1, p2, t1, p3, p4] -> [t1, t2, p1, p2, p3]
        docs = tiny_docs()
        claim = Claim(1, "c", "S", [[("T_Doc", 1), ("T_Doc", 2)]])
        predicted = [RankedSentence("P_Doc", 0, 0.9), RankedSentence("P_Doc", 1, 0.8),
                     RankedSentence("T_Doc", 1, 0.7), RankedSentence("P_Doc", 2, 0.6),
                     RankedSentence("P_Doc", 3, 0.5)]
        ev = build_evidence_set(claim, predicted, docs, m=5, training=True)
        got = [(s.doc_id, s.sent_idx) for s in ev.sentences]
        assert got == [("T_Doc", 1), ("T_Doc", 2), ("P_Doc", 0), ("P_Doc", 1), ("P_Doc", 2)]
        assert ev.z_labels == [1, 1, -1, -1, -1]

    def test_test_mode_top_m_only(self):
        docs = tiny_docs()
        claim = Claim(1, "c", "S", [[("T_Doc", 1)]])
        predicted = [RankedSentence("P_Doc", i, 1.0 - 0.1 * i) for i in range(5)]
        ev = build_evidence_set(claim, predicted, docs, m=3, training=False)
        assert [(s.doc_id, s.sent_idx) for s in ev.sentences] == [
            ("P_Doc", 0), ("P_Doc", 1), ("P_Doc", 2)]
        assert ev.z_labels is None

    def test_duplicate_predictions_collapse(self):
        docs = tiny_docs()
        claim = Claim(1, "c", "N", [])
        predicted = [RankedSentence("P_Doc", 0, 0.9), RankedSentence("P_Doc", 0, 0.9),
                     RankedSentence("P_Doc", 2, 0.8)]
        ev = build_evidence_set(claim, predicted, docs, m=5, training=False)
        assert [(s.doc_id, s.sent_idx) for s in ev.sentences] == [("P_Doc", 0), ("P_Doc", 2)]

    def test_empty_everything_rejected(self):
        docs = tiny_docs()
        claim = Claim(1, "c", "N", [])
        with pytest.raises(ContractError):
            build_evidence_set(claim, [], docs, m=5, training=True)

    def test_text_is_title_prefixed(self):
        docs = tiny_docs()
        claim = Claim(1, "c", "S", [[("T_Doc", 0)]])
        ev = build_evidence_set(claim, [], docs, m=5, training=True)
        assert ev.sentences[0].text == "T Doc : true sentence 0 of record."

    def test_group_order_first_occurrence(self):
        claim = Claim(1, "c", "S", [[("A", 2), ("B", 0)], [("A", 2), ("C", 1)]])
        assert true_evidence_list(claim) == [("A", 2), ("B", 0), ("C", 1)]

    def test_unresolvable_evidence_rejected(self):
        docs = tiny_docs()
        claim = Claim(1, "c", "S", [[("T_Doc", 99)]])
        with pytest.raises(Exception, match="unresolvable"):
            build_evidence_set(claim, [], docs, m=5, training=True)

    def test_z_length_validation(self):
        with pytest.raises(ContractError):
            EvidenceSet(claim=Claim(1, "c", "S", []),
                        sentences=[EvidenceSentence("D", 0, "t")], z_labels=[1, -1])


class TestClassWeights:
    def test_reference_distribution_frozen(self):
        # oracle: beta_y = (1/N_y) / sum_k (1/N_k)
        inv = {y: 1.0 / c for y, c in TABLE_COUNTS.items()}
        denom = sum(inv.values())
        weights = compute_class_weights(TABLE_COUNTS)
        for y in "SRN":
            assert abs(weights.beta[y] - inv[y] / denom) < 1e-12
        assert abs(weights.beta["S"] - 0.16857) < 1e-4
        assert abs(weights.beta["R"] - 0.45310) < 1e-4
        assert abs(weights.beta["N"] - 0.37834) < 1e-4

    def test_uniform_counts(self):
        weights = compute_class_weights({"S": 10, "R": 10, "N": 10})
        for y in "SRN":
            assert abs(weights.beta[y] - 1 / 3) < 1e-12

    @given(st.tuples(st.integers(1, 10**6), st.integers(1, 10**6), st.integers(1, 10**6)))
    @settings(max_examples=50, deadline=None)
    def test_sum_to_one_and_rare_class_weighs_more(self, counts):
        ns, nr, nn = counts
        weights = compute_class_weights({"S": ns, "R": nr, "N": nn})
        assert abs(sum(weights.beta.values()) - 1.0) < 1e-9
        if nr < ns:
            assert weights.beta["R"] > weights.beta["S"]

    def test_zero_count_rejected(self):
        with pytest.raises(ContractError):
            compute_class_weights({"S": 1, "R": 0, "N": 1})
        with pytest.raises(ContractError):
            compute_class_weights({"S": 1, "R": 1})


class TestLosses:
    def test_uniform_prediction_loss_weighted(self):
        weights = compute_class_weights(TABLE_COUNTS)
        probs = Tensor(np.full((1, 3), 1 / 3))
        for y in "SRN":
            loss = prediction_loss(probs, y, weights)
            assert abs(loss.item() - weights.beta[y] * math.log(3.0)) < 1e-12
        # refuted claims cost more than supported under the reference counts
        assert (prediction_loss(probs, "R", weights).item()
                > prediction_loss(probs, "S", weights).item())

    def test_unweighted_is_plain_cross_entropy(self):
        probs = Tensor(np.array([[0.2, 0.5, 0.3]]))
        loss = prediction_loss(probs, "R", None)
        assert abs(loss.item() + math.log(0.5)) < 1e-12

    def test_joint_loss_uniform_heads_frozen_value(self):
        # zeroed heads: prediction beta_y*ln3, each of the 5 sentences ln2
        docs, cfg, params = tiny_model()
        params.aux_head = zero_mlp(8, 2)
        params.pred_head = zero_mlp(8, 3)
        claim = Claim(5, "a plain claim about the record", "R", [[("T_Doc", 0)]])
        predicted = [RankedSentence("P_Doc", i, 0.5) for i in range(4)]
        ev = build_evidence_set(claim, predicted, docs, m=5, training=True)
        assert len(ev.sentences) == 5
        weights = compute_class_weights(TABLE_COUNTS)
        loss = joint_loss(ev, params, cfg, weights)
        want = weights.beta["R"] * math.log(3.0) + 5.0 * math.log(2.0)
        assert abs(loss.item() - want) < 1e-9

    def test_zero_aux_weight_is_prediction_only(self):
        docs, cfg0, params = tiny_model(aux_weight=0.0)
        ev = training_set(docs)
        weights = compute_class_weights(TABLE_COUNTS)
        loss = joint_loss(ev, params, cfg0, weights)
        result = forward(ev, params, cfg0)
        want = prediction_loss(result.label_probs, "S", weights)
        assert loss.item() == want.item()

    def test_missing_z_labels_rejected(self):
        docs, cfg, params = tiny_model()
        claim = Claim(5, "a plain claim about the record", "S", [[("T_Doc", 0)]])
        predicted = [RankedSentence("P_Doc", 0, 0.9)]
        ev = build_evidence_set(claim, predicted, docs, m=5, training=False)
        with pytest.raises(ContractError, match="z labels"):
            joint_loss(ev, params, cfg, None)

    def test_missing_label_rejected(self):
        docs, cfg, params = tiny_model()
        claim = Claim(5, "a plain claim about the record", None, [[("T_Doc", 0)]])
        ev = build_evidence_set(claim, [], docs, m=5, training=True)
        with pytest.raises(ContractError, match="label"):
            joint_loss(ev, params, cfg, None)


class TestForward:
    def test_shapes_and_ranges(self):
        docs, cfg, params = tiny_model(seed=2)
        ev = training_set(docs, n_sent=4)
        result = forward(ev, params, cfg)
        assert result.label_probs.shape == (1, 3)
        assert abs(result.label_probs.data.sum() - 1.0) < 1e-12
        assert result.gate_scores.shape == (4,)
        assert np.all(result.gate_scores.data >= 0) and np.all(result.gate_scores.data <= 1)
        assert result.summary.shape == (1, 8)
        assert len(result.sentence_probs) == 4

    def test_too_many_sentences_rejected(self):
        docs, cfg, params = tiny_model()
        claim = Claim(5, "a plain claim about the record", "S", [[("T_Doc", 0)]])
        sentences = [EvidenceSentence("P_Doc", i, f"s {i}") for i in range(6)]
        ev = EvidenceSet(claim=claim, sentences=sentences)
        with pytest.raises(ContractError, match="max_sentences"):
            forward(ev, params, cfg)

    @pytest.mark.parametrize("gate", list(GateStrategy))
    def test_all_gate_strategies_run(self, gate):
        docs, cfg, params = tiny_model(seed=3, gate_strategy=gate)
        result = forward(training_set(docs), params, cfg)
        assert np.all(np.isfinite(result.label_probs.data))

    def test_permutation_without_pe_preserves_verdict(self):
        docs, cfg, params = tiny_model(seed=4, token_pe=False)
        ev = training_set(docs, n_sent=4)
        base = forward(ev, params, cfg)
        perm = [2, 0, 3, 1]
        shuffled = EvidenceSet(
            claim=ev.claim,
            sentences=[ev.sentences[i] for i in perm],
            z_labels=[ev.z_labels[i] for i in perm],
        )
        moved = forward(shuffled, params, cfg)
        np.testing.assert_allclose(moved.label_probs.data, base.label_probs.data, atol=1e-9)
        np.testing.assert_allclose(moved.gate_scores.data,
                                   base.gate_scores.data[perm], atol=1e-12)

    def test_permutation_with_pe_changes_probs(self):
        docs, cfg, params = tiny_model(seed=4, std=0.5, token_pe=True)
        ev = training_set(docs, n_sent=4)
        base = forward(ev, params, cfg)
        shuffled = EvidenceSet(claim=ev.claim,
                               sentences=list(reversed(ev.sentences)),
                               z_labels=list(reversed(ev.z_labels)))
        moved = forward(shuffled, params, cfg)
        assert np.abs(moved.label_probs.data - base.label_probs.data).max() > 1e-6

    def test_component_toggles_change_output(self):
        docs, _, params = tiny_model(seed=5, std=0.5)
        ev = training_set(docs)
        outs = {}
        for name, kw in [("full", {}), ("no_tok", {"use_token_attn": False}),
                         ("no_sent", {"use_sent_attn": False})]:
            cfg = ModelConfig(width=8, n_heads=2, depth=1, max_len=16,
                              max_sentences=5, dropout=0.0, **kw)
            outs[name] = forward(ev, params, cfg).label_probs.data
        assert np.abs(outs["full"] - outs["no_tok"]).max() > 1e-6
        assert np.abs(outs["full"] - outs["no_sent"]).max() > 1e-6

    def test_stop_gate_grad_cuts_aux_gradients(self):
        docs, _, params = tiny_model(seed=6)
        ev = training_set(docs)
        stopped = ModelConfig(width=8, n_heads=2, depth=1, max_len=16, max_sentences=5,
                              dropout=0.0, aux_weight=0.0, stop_gate_grad=True)
        joint_loss(ev, params, stopped, None).backward()
        assert params.aux_head.w1.grad is None
        flowing = ModelConfig(width=8, n_heads=2, depth=1, max_len=16, max_sentences=5,
                              dropout=0.0, aux_weight=0.0, stop_gate_grad=False)
        joint_loss(ev, params, flowing, None).backward()
        assert params.aux_head.w1.grad is not None

    def test_gradient_check_through_joint_loss(self):
        docs, cfg, params = tiny_model(seed=7)
        ev = training_set(docs, n_sent=2)
        weights = compute_class_weights({"S": 5, "R": 3, "N": 2})
        target = params.pred_head.w2
        err = grad_check(lambda _: joint_loss(ev, params, cfg, weights), target)
        assert err < 1e-4

    def test_dropout_needs_rng_only_in_train(self):
        docs, _, params = tiny_model(seed=8, dropout=0.1)
        cfg = ModelConfig(width=8, n_heads=2, depth=1, max_len=16, max_sentences=5,
                          dropout=0.1)
        ev = training_set(docs)
        a = forward(ev, params, cfg, train=False)
        b = forward(ev, params, cfg, train=False)
        np.testing.assert_array_equal(a.label_probs.data, b.label_probs.data)
        rng = np.random.default_rng(0)
        c = forward(ev, params, cfg, rng=rng, train=True)
        assert not np.array_equal(a.label_probs.data, c.label_probs.data)


class TestPredictAndVerdicts:
    def test_uniform_tie_resolves_to_supported(self):
        docs, cfg, params = tiny_model()
        params.pred_head = zero_mlp(8, 3)
        ev = training_set(docs)
        label, probs = predict_label(ev, params, cfg)
        assert label == "S"
        np.testing.assert_allclose(probs, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_verdict_round_trip(self, tmp_path):
        verdicts = [
            Verdict(1, "S", [("A_Doc", 0), ("B_Doc", 2)], (0.7, 0.2, 0.1)),
            Verdict(2, "N", [], (0.1, 0.1, 0.8)),
        ]
        path = tmp_path / "verdicts.jsonl"
        write_verdicts(path, verdicts)
        again = read_verdicts(path)
        assert again == verdicts

    def test_wire_labels(self, tmp_path):
        import json
        path = tmp_path / "verdicts.jsonl"
        write_verdicts(path, [Verdict(1, "N", [], (0.0, 0.0, 1.0))])
        obj = json.loads(path.read_text().splitlines()[0])
        assert obj["predicted_label"] == "NOT ENOUGH INFO"
        assert obj["predicted_evidence"] == []

    def test_bad_verdict_line_reported(self, tmp_path):
        path = tmp_path / "verdicts.jsonl"
        path.write_text('{"id": 1, "predicted_label": "SUPPORTS"}\n{"id": 2}\n')
        with pytest.raises(Exception, match=":2"):
            read_verdicts(path)
