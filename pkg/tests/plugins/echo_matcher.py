"""Test matcher speaking MMREG/1: validates the request, answers with fixed matches."""
import sys
import time

import numpy as np

FIXED_MATCHES = [
    (1.0, 2.0, 3.0, 4.0, 0.9),
    (5.0, 6.0, 7.0, 8.0, 0.8),
    (10.0, 10.0, 12.0, 11.0, 0.5),
    (20.0, 5.0, 21.0, 6.0, 0.25),
]


def main(argv):
    raw = sys.stdin.buffer.read()
    header, _, payload = raw.partition(b'\n')
    fields = header.decode('ascii').split()
    if len(fields) != 5 or fields[0] != 'MMREG/1':
        print(f"bad header {header!r}", file=sys.stderr)
        return 2
    wa, ha, wb, hb = (int(v) for v in fields[1:])
    pixels = np.frombuffer(payload, dtype='<f4')
    if pixels.size != wa * ha + wb * hb:
        print(f"bad payload size {len(payload)}", file=sys.stderr)
        return 2
    if '--sleep' in argv:
        time.sleep(float(argv[argv.index('--sleep') + 1]))
    matches = list(FIXED_MATCHES)
    if '--duplicate' in argv:
        matches.append((1.0, 2.0, 30.0, 30.0, 0.1))
    lines = [f"MATCHES {len(matches)}"] + [" ".join(repr(v) for v in m) for m in matches]
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


if __name__ == '__main__':
    sys.exit(main(sys.argv[1:]))
