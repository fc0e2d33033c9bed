# Independent reference for crop + bilinear resize (half-pixel centers,
# edge clamping, ties-to-even rounding). Writes bilinear_golden.txt.
from fractions import Fraction
import math

def src_pixel(x, y):
    return (x * 30 % 256, y * 30 % 256, (x + y) * 15 % 256)

def tri(t):
    return max(Fraction(0), 1 - abs(t))

def sample(cx, cy, cw, ch, ow, oh):
    out = []
    for dy in range(oh):
        fy = (Fraction(2 * dy + 1, 2) * Fraction(ch, oh)) - Fraction(1, 2)
        fy = min(max(fy, Fraction(0)), Fraction(ch - 1))
        for dx in range(ow):
            fx = (Fraction(2 * dx + 1, 2) * Fraction(cw, ow)) - Fraction(1, 2)
            fx = min(max(fx, Fraction(0)), Fraction(cw - 1))
            for c in range(3):
                # triangle-kernel sum over the whole crop
                acc = Fraction(0)
                for j in range(ch):
                    wy = tri(fy - j)
                    if wy == 0:
                        continue
                    for i in range(cw):
                        wx = tri(fx - i)
                        if wx:
                            acc += wx * wy * src_pixel(cx + i, cy + j)[c]
                out.append(round(acc))  # Python round on Fraction is ties-to-even
    return out

cases = [
    (2, 2, 4, 4, 4, 4),
    (2, 2, 4, 4, 6, 5),
    (0, 0, 8, 8, 3, 3),
    (1, 3, 5, 2, 7, 4),
    (0, 0, 8, 8, 16, 16),
    (3, 0, 1, 8, 2, 3),
]
with open("bilinear_golden.txt", "w") as f:
    f.write("# crop_x crop_y crop_w crop_h out_w out_h : RGB bytes\n")
    for case in cases:
        px = sample(*case)
        f.write(" ".join(map(str, case)) + " : " + " ".join(map(str, px)) + "\n")
