import json

import numpy as np
import pytest

from sdnet import analysis, arch
from sdnet.errors import ShapeError
from sdnet.sdn import SdnLayerConfig, init_sdn_params
from sdnet.tensor import ParamStore


def plain(convs=0, head_kernel=1, in_channels=1, out_classes=2, sd=None, **kw):
    spec = dict(family="plain", depth=1, base_width=4, convs_per_block=convs, head_kernel=head_kernel,
                in_channels=in_channels, out_classes=out_classes)
    if sd is not None:
        spec.update(sd_scales=(0,), sdn_config=sd)
    spec.update(kw)
    return arch.ArchitectureSpec(**spec)


class TestReceptiveField:
    @pytest.mark.parametrize("seed", range(3))
    def test_single_conv_is_local(self, seed):
        net = arch.build(plain(head_kernel=3), seed=seed)
        rep = analysis.probe_receptive_field(net, (1, 9, 9), (4, 4), seed=seed)
        (r0, r1), (c0, c1) = rep.bbox
        assert 3 <= r0 and r1 <= 5 and 3 <= c0 and c1 <= 5
        assert rep.footprint[4, 4]

    @pytest.mark.parametrize("n", [1, 2, 4])
    def test_conv_stack_bound(self, n):
        net = arch.build(plain(convs=n), seed=0)
        rep = analysis.probe_receptive_field(net, (1, 24, 24), (12, 12))
        bound = analysis.conv_stack_rf(n)
        assert bound == 2 * n + 1
        h, w = rep.extent
        assert h <= bound and w <= bound
        (r0, r1), (c0, c1) = rep.bbox
        assert r0 >= 12 - n and r1 <= 12 + n and c0 >= 12 - n and c1 <= 12 + n

    def test_lr_layer_spans_to_column_zero(self):
        cfg = SdnLayerConfig(state_size=4, directions=("LR",))
        hits = 0
        for seed in range(10):
            net = arch.build(plain(sd=cfg), seed=seed)
            rep = analysis.probe_receptive_field(net, (1, 12, 12), (6, 11), seed=seed)
            hits += rep.full_width and rep.bbox[1] == (0, 11)
        assert hits >= 9

    def test_lr_layer_ignores_columns_ahead(self):
        cfg = SdnLayerConfig(state_size=4, directions=("LR",))
        rep = analysis.probe_receptive_field(arch.build(plain(sd=cfg)), (1, 10, 10), (5, 4))
        assert not rep.footprint[:, 5:].any()

    def test_bottleneck_sd_covers_image(self):
        base = arch.ArchitectureSpec(family="unet", depth=2, base_width=4)
        with_sd = arch.with_sd(base, [1], config=SdnLayerConfig(state_size=4))
        full = 0
        for seed in range(10):
            rep = analysis.probe_receptive_field(arch.build(with_sd, seed=seed), (1, 32, 32), (16, 16), seed=seed)
            full += rep.full_width and rep.full_height
        plain_rep = analysis.probe_receptive_field(arch.build(base), (1, 32, 32), (16, 16))
        assert full >= 6
        assert plain_rep.extent[0] < 32 and not plain_rep.full_width

    def test_out_of_bounds(self):
        with pytest.raises(ShapeError):
            analysis.probe_receptive_field(arch.build(plain()), (1, 4, 4), (4, 0))

    def test_report_serialises(self):
        rep = analysis.probe_receptive_field(arch.build(plain(head_kernel=3)), (1, 5, 5), (0, 0))
        d = json.loads(rep.to_json())
        assert d["bbox"] == {"rows": [0, 1], "cols": [0, 1]}
        assert d["extent"] == [2, 2] and d["full_width"] is False
        mask = rep.heat_mask()
        assert mask[0, 0] == 128 and mask[1, 1] == 255 and mask[4, 4] == 0


class TestParams:
    def test_single_conv(self):
        # 4 filters of 1x3x3 plus 4 biases
        assert analysis.count_params(arch.build(plain(head_kernel=3, out_classes=4))) == 4 * 1 * 9 + 4 == 40

    def test_single_sd_layer(self):
        store = ParamStore()
        cfg = SdnLayerConfig(state_size=3, directions=("LR",), kernel_width=3)
        init_sdn_params(store, "sd", 2, cfg, np.random.default_rng(0))
        assert analysis.count_params(store) == 6 + 3 + 6 * 27 + 3 * 3 + 6 + 2 == 188

    def test_sd_layer_in_network(self):
        cfg = SdnLayerConfig(state_size=3, directions=("LR",))
        assert analysis.count_params(arch.build(plain(in_channels=2, sd=cfg))) == 188 + 2 * 2 + 2

    def test_reinit_invariant(self):
        spec = arch.presets("sdu_net", "nuclei", depth=3)
        assert analysis.count_params(arch.build(spec, seed=0)) == analysis.count_params(arch.build(spec, seed=5))

    def test_running_stats_not_counted(self):
        net = arch.build(plain(convs=1))
        # conv 4*1*9+4, BN gamma/beta 8, head 2*4+2
        assert analysis.count_params(net) == 40 + 8 + 10
        assert net.params.num_elements() == 58 + 8


class TestMacs:
    def test_single_conv(self):
        assert analysis.count_macs(plain(head_kernel=3, out_classes=1), (1, 8, 8)) == 8 * 8 * 9 == 576

    def test_affine(self):
        assert analysis.affine_macs(8, 8, 2, 3) == 384

    def test_single_sd_layer(self):
        cfg = SdnLayerConfig(state_size=3, directions=("LR",), kernel_width=3)
        # two projections + six width-3 convs per pixel over the state
        expected = 2 * 64 * 2 * 3 + 6 * 64 * 3 * 3 * 3
        assert analysis.sdn_macs(8, 8, 2, cfg) == expected == 11136
        assert analysis.count_macs(plain(in_channels=2, sd=cfg), (2, 8, 8)) == expected + 64 * 2 * 2

    @pytest.mark.parametrize("spec", [plain(convs=3), arch.ArchitectureSpec(depth=3, base_width=4)])
    def test_doubling_height_doubles(self, spec):
        assert analysis.count_macs(spec, (1, 32, 16)) == 2 * analysis.count_macs(spec, (1, 16, 16))

    def test_network_or_spec(self):
        spec = arch.ArchitectureSpec(depth=2, base_width=4)
        assert analysis.count_macs(arch.build(spec), (1, 16, 16)) == analysis.count_macs(spec, (1, 16, 16))


@pytest.mark.parametrize("task", ["nuclei", "polyps", "liver"])
def test_sd_variants_cost_more(task):
    shape = (3 if task != "liver" else 1, 64, 64)
    pairs = [("unet", "sdu_net"), ("unetpp", "sdnu_net")]
    for base, sd in pairs:
        b, s = arch.presets(base, task, depth=3), arch.presets(sd, task, depth=3)
        assert analysis.count_params(arch.build(s)) > analysis.count_params(arch.build(b))
        assert analysis.count_macs(s, shape) > analysis.count_macs(b, shape)


def test_grad_check_flags_wrong_gradient():
    from sdnet.tensor import record

    def bad_square(x):
        return record(x.data ** 2, (x,), "bad", lambda g, needs: (g * x.data,))

    from sdnet import ops
    rep = analysis.grad_check(lambda x: ops.sum(bad_square(x)), {"x": np.array([1.0, 2.0])})
    assert not rep.passed and rep.max_rel_error == pytest.approx(0.5, abs=1e-6)
