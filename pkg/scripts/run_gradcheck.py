"""Finite-difference gradient suite, optionally with the conv sign fault injected."""
import argparse
import sys

from latentcnn.experiments import gradient_suite

p = argparse.ArgumentParser()
p.add_argument("--seeds", type=int, default=10)
p.add_argument("--fault", action="store_true", help="flip the sign of the conv input gradient")
args = p.parse_args()

rep = gradient_suite(seeds=args.seeds, fault="conv-sign" if args.fault else None)
print("\n".join(rep.lines()))
print(f"{'PASS' if rep.passed else 'FAIL'} in {rep.seconds:.1f}s")
sys.exit(0 if rep.passed else 1)
