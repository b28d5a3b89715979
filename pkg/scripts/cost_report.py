"""Analytic parameter / multiply-accumulate counts for the shipped configs, next to the reference figures."""

from d2aunet.model import count_params_flops, full_resnext_config, full_vgg_config

REFERENCE = {"vgg": (8.95e6, 53.19e9), "resnext": (90.05e6, 149.97e9)}


def main():
    for name, cfg in (("vgg", full_vgg_config()), ("resnext", full_resnext_config())):
        params, macs = count_params_flops(cfg, 448)
        ref_p, ref_f = REFERENCE[name]
        print(f"{name:8s} params {params / 1e6:7.2f} M ({params / ref_p - 1:+.1%} vs {ref_p / 1e6:.2f} M)   "
              f"flops {macs / 1e9:7.2f} G ({macs / ref_f - 1:+.1%} vs {ref_f / 1e9:.2f} G)")


if __name__ == "__main__":
    main()
