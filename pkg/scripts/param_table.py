"""Parameter counts of the four reference networks, per layer and in total."""
import argparse

from hcnn.config import NetworkConfig
from hcnn.model import count_parameters

NETWORKS = [
    ("CIFAR-10", NetworkConfig.cifar10, 0.098e6, 0.34e6),
    ("CIFAR-100", NetworkConfig.cifar100, 0.25e6, 0.89e6),
]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--layers", action="store_true", help="also print per-layer counts")
    args = p.parse_args()
    print(f"| {'network':<10} | {'variant':<8} | {'total':>8} | {'reference':>9} | {'off':>6} |")
    print(f"|{'-' * 12}|{'-' * 10}|{'-' * 10}|{'-' * 11}|{'-' * 8}|")
    for name, make, std_ref, plus_ref in NETWORKS:
        for variant, ref in (("standard", std_ref), ("plus", plus_ref)):
            counts = count_parameters(make(variant))
            off = 100 * (counts["total"] - ref) / ref
            print(f"| {name:<10} | {variant:<8} | {counts['total']:>8} | {ref:>9.0f} | "
                  f"{off:>5.1f}% |")
            if args.layers:
                for layer in counts["layers"]:
                    print(f"|   j={layer['depth']:<6} |          | {layer['trainable']:>8} |"
                          f"           |        |")


if __name__ == "__main__":
    main()
