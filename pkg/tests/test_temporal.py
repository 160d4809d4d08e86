from __future__ import annotations

import pytest
import torch
from torch.autograd import gradcheck

from pcreid.config import EncoderConfig, TemporalConfig
from pcreid.errors import InvalidInputError
from pcreid.network import ReIDNetwork, build_encoder, build_temporal
from pcreid.temporal import TransformerFusion, sinusoidal_encoding


@pytest.fixture
def fusion(temporal_config: TemporalConfig) -> TransformerFusion:
    return TransformerFusion(temporal_config, 16).double().eval()


@pytest.fixture
def network(encoder_config: EncoderConfig, temporal_config: TemporalConfig) -> ReIDNetwork:
    return ReIDNetwork(encoder_config, temporal_config, num_classes=5).double().eval()


def test_sinusoidal_first_position() -> None:
    table = sinusoidal_encoding(4, 6)
    assert table[0].tolist() == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]


def test_sinusoidal_shape() -> None:
    assert sinusoidal_encoding(30, 16).shape == (30, 16)


def test_fusion_output_width(fusion: TransformerFusion) -> None:
    assert fusion(torch.randn(3, 5, 16, dtype=torch.float64)).shape == (3, 16)


def test_fusion_unbatched(fusion: TransformerFusion) -> None:
    assert fusion(torch.randn(1, 16, dtype=torch.float64)).shape == (16,)


def test_fusion_order_sensitive(fusion: TransformerFusion) -> None:
    frames = torch.randn(1, 4, 16, dtype=torch.float64)
    reversed_frames = frames.flip(1)
    assert not torch.allclose(fusion(frames), fusion(reversed_frames))


def test_fusion_order_invariant_without_positions(temporal_config: TemporalConfig) -> None:
    config = temporal_config.model_copy(update={"positional": "none"})
    fusion = TransformerFusion(config, 16).double().eval()
    frames = torch.randn(1, 4, 16, dtype=torch.float64)
    torch.testing.assert_close(fusion(frames), fusion(frames[:, [2, 0, 3, 1]]))


def test_fusion_too_long(fusion: TransformerFusion) -> None:
    with pytest.raises(InvalidInputError, match="outside 1..8"):
        fusion(torch.randn(1, 9, 16, dtype=torch.float64))


def test_fusion_wrong_width(fusion: TransformerFusion) -> None:
    with pytest.raises(InvalidInputError, match="frame vectors"):
        fusion(torch.randn(1, 4, 12, dtype=torch.float64))


def test_fusion_indivisible_heads(temporal_config: TemporalConfig) -> None:
    with pytest.raises(InvalidInputError, match="not divisible"):
        TransformerFusion(temporal_config, 15)


def test_attention_rows_sum_to_one(fusion: TransformerFusion) -> None:
    (weights,) = fusion.attention_weights(torch.randn(2, 5, 16, dtype=torch.float64))
    assert weights.shape == (2, 2, 5, 5)
    torch.testing.assert_close(weights.sum(dim=-1), torch.ones(2, 2, 5, dtype=torch.float64))


def test_fusion_gradient() -> None:
    config = TemporalConfig(layers=1, heads=1, feedforward=16, max_length=8)
    fusion = TransformerFusion(config, 8).double().eval()
    frames = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
    assert gradcheck(fusion.fuse, (frames,))


def test_plugins(encoder_config: EncoderConfig, temporal_config: TemporalConfig) -> None:
    encoder = build_encoder(encoder_config)
    assert isinstance(build_temporal(temporal_config, encoder.output_dim), TransformerFusion)


def test_unknown_plugin(encoder_config: EncoderConfig) -> None:
    config = encoder_config.model_copy(update={"name": "pointnet"})
    with pytest.raises(LookupError, match="pointnet"):
        build_encoder(config)


def test_network_forward(encoder_config: EncoderConfig, temporal_config: TemporalConfig) -> None:
    network = ReIDNetwork(encoder_config, temporal_config, num_classes=5)
    embeddings, logits = network(torch.randn(2, 3, 32, 3))
    assert embeddings.shape == (2, network.embedding_dim)
    assert logits.shape == (2, 5)


def test_long_sequences_are_chunked_after_encoding(network: ReIDNetwork) -> None:
    points = torch.randn(1, 12, 32, 3, dtype=torch.float64)
    with torch.no_grad():
        frames = network.encoder.encode_sequences(points)
        expected = (network.temporal.fuse(frames[:, :8]) + network.temporal.fuse(frames[:, 8:])) / 2
        torch.testing.assert_close(network.embed(points), expected)


def test_chunk_boundary_uses_next_frame(network: ReIDNetwork) -> None:
    points = torch.randn(1, 12, 32, 3, dtype=torch.float64)
    changed = points.clone()
    changed[:, 8] = torch.randn(32, 3, dtype=torch.float64)
    with torch.no_grad():
        before = network.encoder.encode_sequences(points)
        after = network.encoder.encode_sequences(changed)

    # frame 7 closes the first chunk but is still supplemented by frame 8
    assert not torch.equal(before[0, 7], after[0, 7])
    assert torch.equal(before[0, :7], after[0, :7])
