"""Where the multiply-accumulates go: encoder vs decoder for every preset at full and desk resolution.

    python3 scripts/profile_budget.py
"""
from segdec.arch import PRESET_NAMES, resolve_arch
from segdec.profiler import profile


def main():
    print(f"{'config':<9}{'input':>14}{'params':>10}{'enc GMAC':>10}{'dec GMAC':>10}{'enc share':>11}")
    for shape in ((3, 384, 1280), None):
        for name in PRESET_NAMES:
            arch = resolve_arch(name, shape)
            inp = arch.encoder.input_shape
            split = profile(arch.build(), inp).split
            enc, dec = split["encoder"], split["decoder"]
            print(f"{name:<9}{'x'.join(map(str, inp)):>14}{enc['params'] + dec['params']:>10}"
                  f"{enc['macs'] / 1e9:>10.3f}{dec['macs'] / 1e9:>10.4f}{split['encoder_mac_share']:>11.4f}")


if __name__ == "__main__":
    main()
