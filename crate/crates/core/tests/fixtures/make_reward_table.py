"""Regenerates reward_table_4x8.tsv: a seeded synthetic landscape over ACGT^8
(position weights, adjacent-pair couplings and a little noise)."""
import itertools
import random

rng = random.Random(20240605)
alphabet = "ACGT"
length = 8
site = [[rng.gauss(0, 1) for _ in alphabet] for _ in range(length)]
pair = [[[rng.gauss(0, 0.5) for _ in alphabet] for _ in alphabet] for _ in range(length - 1)]

with open("reward_table_4x8.tsv", "w", newline="\n") as out:
    out.write("# sequence\tscore\n")
    for seq in itertools.product(range(4), repeat=length):
        s = sum(site[i][a] for i, a in enumerate(seq))
        s += sum(pair[i][seq[i]][seq[i + 1]] for i in range(length - 1))
        s += rng.gauss(0, 0.2)
        out.write("%s\t%.6f\n" % ("".join(alphabet[a] for a in seq), s))
