import math

import pytest
import torch

from trainer_bridge.data import encode_batch
from trainer_bridge.errors import BridgeConfigError
from trainer_bridge.model import (
    ByteDecoder,
    ModelSpec,
    resolve_model_spec,
    sequence_logprobs,
    token_nll,
    warmup_lr,
)
from trainer_bridge.vocab import VOCAB_SIZE


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return ByteDecoder(ModelSpec(d_model=32, n_heads=2, n_layers=2, max_seq_len=64)).eval()


def test_spec_validation():
    with pytest.raises(BridgeConfigError, match="divisible"):
        ModelSpec(d_model=30, n_heads=4)
    with pytest.raises(BridgeConfigError, match="positive"):
        ModelSpec(n_layers=0)


def test_model_registry():
    spec = resolve_model_spec("tiny-byte-decoder")
    assert spec.d_model % spec.n_heads == 0
    with pytest.raises(BridgeConfigError, match="unknown model_id"):
        resolve_model_spec("mistral-7b")


def test_forward_shape_and_param_count(tiny_model):
    ids = torch.randint(0, VOCAB_SIZE, (3, 10))
    logits = tiny_model(ids)
    assert logits.shape == (3, 10, VOCAB_SIZE)
    assert tiny_model.parameter_count() > 10_000


def test_sequence_too_long_is_rejected(tiny_model):
    ids = torch.zeros((1, 65), dtype=torch.long)
    with pytest.raises(BridgeConfigError, match="max_seq_len"):
        tiny_model(ids)


def test_attention_is_causal(tiny_model):
    torch.manual_seed(1)
    ids = torch.randint(0, 256, (1, 12))
    changed = ids.clone()
    changed[0, -1] = (changed[0, -1] + 1) % 256
    with torch.no_grad():
        a = tiny_model(ids)
        b = tiny_model(changed)
    # a later token must not influence earlier logits
    assert torch.allclose(a[:, :-1, :], b[:, :-1, :], atol=1e-6)
    assert not torch.allclose(a[:, -1, :], b[:, -1, :], atol=1e-3)


def test_sequence_logprobs_match_manual_computation(tiny_model):
    batch = encode_batch([("hello", "world"), ("hi", "there friend")], max_len=64)
    with torch.no_grad():
        got = sequence_logprobs(tiny_model, batch.ids, batch.score_mask)
        manual = []
        for row in range(batch.ids.shape[0]):
            logits = tiny_model(batch.ids[row : row + 1])
            logprobs = torch.log_softmax(logits[0].float(), dim=-1)
            total = 0.0
            for t in range(1, batch.ids.shape[1]):
                if batch.score_mask[row, t]:
                    total += logprobs[t - 1, batch.ids[row, t]].item()
            manual.append(total)
    assert got.shape == (2,)
    assert got[0].item() == pytest.approx(manual[0], abs=1e-3)
    assert got[1].item() == pytest.approx(manual[1], abs=1e-3)
    assert (got <= 0).all()


def test_padding_does_not_change_logprobs(tiny_model):
    alone = encode_batch([("question", "answer")], max_len=64)
    padded = encode_batch([("question", "answer"), ("q", "a much longer completion text")], max_len=64)
    with torch.no_grad():
        lp_alone = sequence_logprobs(tiny_model, alone.ids, alone.score_mask)
        lp_padded = sequence_logprobs(tiny_model, padded.ids, padded.score_mask)
    assert lp_alone[0].item() == pytest.approx(lp_padded[0].item(), abs=1e-4)


def test_token_nll_is_mean_per_scored_token(tiny_model):
    batch = encode_batch([("a", "bc")], max_len=64)
    with torch.no_grad():
        nll = token_nll(tiny_model, batch.ids, batch.score_mask)
        seq = sequence_logprobs(tiny_model, batch.ids, batch.score_mask)
    n_scored = int(batch.score_mask[:, 1:].sum())
    assert n_scored == 3  # two completion bytes plus EOS
    assert nll.item() == pytest.approx(-seq[0].item() / n_scored, rel=1e-6)
    # an untrained model sits near the uniform floor
    assert 0 < nll.item() < 2 * math.log(VOCAB_SIZE)


def test_warmup_schedule():
    # 10% of 100 steps -> 10 warmup steps, linear ramp then flat
    assert warmup_lr(1, 100, 1e-3, 0.1) == pytest.approx(1e-4)
    assert warmup_lr(5, 100, 1e-3, 0.1) == pytest.approx(5e-4)
    assert warmup_lr(10, 100, 1e-3, 0.1) == pytest.approx(1e-3)
    assert warmup_lr(50, 100, 1e-3, 0.1) == pytest.approx(1e-3)
    assert warmup_lr(1, 100, 1e-3, 0.0) == pytest.approx(1e-3)


def test_two_models_same_seed_are_identical():
    torch.manual_seed(7)
    a = ByteDecoder(ModelSpec(d_model=32, n_heads=2, n_layers=1))
    torch.manual_seed(7)
    b = ByteDecoder(ModelSpec(d_model=32, n_heads=2, n_layers=1))
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
