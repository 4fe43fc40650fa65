"""Bitwise equivalence of every prefill strategy against the standard pass.

Runs the small desk-scale model at a few prompt lengths and partition sizes,
compares last logits, every K/V cache row and a 20-token greedy continuation,
then repeats one check with a single weight bit flipped to show the harness
catches a real difference.

    python3 demos/equivalence.py
"""

from mominfer import equivalence_check


def main():
    for S in (1, 257, 1024):
        rep = equivalence_check(S, sorted({1, 16, S, S + 7}), n_decode=20)
        print(f"S={S}: {'all arms identical' if rep.passed else 'MISMATCH'}")
        for line in rep.lines():
            print("   ", line)

    print("\nself-test, one flipped bit in the first arm:")
    rep = equivalence_check(64, [16], n_decode=5, self_test=True)
    for line in rep.lines():
        print("   ", line)


if __name__ == "__main__":
    main()
