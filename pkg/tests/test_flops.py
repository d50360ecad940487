"""Analytical complexity model tests."""

import pytest

from dsppo.flops import (
    ArchSpec,
    REFERENCE_GRID,
    episode_flops,
    mlp_flops,
    reference_table,
    svd_flops,
    total_flops,
)


class TestMlpFlops:
    def test_single_unit_layer(self):
        assert mlp_flops(1, (), 1) == 2

    def test_stage1_actor_dims(self):
        # 72 -> 64 -> 64 -> 64 -> 36: direct arithmetic
        want = 2 * (72 * 64 + 64 * 64 + 64 * 64 + 64 * 36)
        assert want == 30208
        assert mlp_flops(72, (64, 64, 64), 36) == 30208

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            mlp_flops(0, (4,), 2)


class TestSvdFlops:
    def test_direct_values(self):
        assert svd_flops(9, 2) == 288
        assert svd_flops(9, 6) == 2592

    def test_single_user(self):
        assert svd_flops(7, 1) == 8 * 7


class TestEpisodeFlops:
    def test_rollout_only_when_no_training(self):
        arch = ArchSpec(m_antennas=9, n_users=2, cluster_size=4)
        rep = episode_flops(arch, L=4, T=512, e1=0, e2=0)
        assert rep.training == 0.0
        assert rep.per_episode == pytest.approx(512 * 4 * rep.per_step)

    def test_components_sum_to_total(self):
        arch = ArchSpec(m_antennas=9, n_users=4, cluster_size=6)
        rep = episode_flops(arch, L=6, T=512)
        assert sum(rep.components.values()) == pytest.approx(rep.per_episode, rel=1e-12)

    def test_training_dominates(self):
        for L, K in REFERENCE_GRID:
            arch = ArchSpec(m_antennas=9, n_users=K, cluster_size=L)
            rep = episode_flops(arch, L=L, T=512)
            assert rep.neural_share > 0.99

    def test_reference_values_within_band(self):
        # published per-episode GFLOPS with +/-20% tolerance
        targets = {(4, 2): 1.7, (4, 4): 2.9, (4, 6): 4.3, (6, 2): 2.6, (6, 4): 4.5, (6, 6): 6.7}
        for (L, K), want in targets.items():
            arch = ArchSpec(m_antennas=9, n_users=K, cluster_size=L)
            rep = episode_flops(arch, L=L, T=512)
            assert rep.per_episode / 1e9 == pytest.approx(want, rel=0.2)

    def test_cluster_scaling_ratio(self):
        a42 = episode_flops(ArchSpec(9, 2, 4), L=4, T=512)
        a62 = episode_flops(ArchSpec(9, 2, 6), L=6, T=512)
        ratio = a62.per_episode / a42.per_episode
        assert 1.45 <= ratio <= 1.60


class TestTotalFlops:
    def test_single_episode_equals_episode_flops(self):
        arch = ArchSpec(9, 2, 4)
        assert total_flops(arch, L=4, T=512, n_episodes=1) == pytest.approx(
            episode_flops(arch, L=4, T=512).per_episode
        )

    def test_reference_total_scales_with_episodes(self):
        arch = ArchSpec(9, 2, 4)
        per = episode_flops(arch, L=4, T=512).per_episode
        assert total_flops(arch, L=4, T=512, n_episodes=389) == pytest.approx(389 * per)

    def test_svd_share_below_one_percent_even_at_scale(self):
        arch = ArchSpec(m_antennas=9, n_users=30, cluster_size=20)
        rep = episode_flops(arch, L=20, T=512)
        assert rep.svd / rep.per_episode < 0.01


class TestReferenceTable:
    def test_covers_grid(self):
        rows = reference_table()
        assert [(r["L"], r["K"]) for r in rows] == REFERENCE_GRID
        for row in rows:
            assert row["per_episode_gflops"] > 0
            assert row["neural_share"] > 0.99
