/**
 * ASCII OBJ serialization of a mesh payload, byte-compatible with the model
 * service's own exporter (printf "%.17g" number formatting, `v`/`vt`/`f a/a`
 * records, 1-based indices).
 */
import type { MeshPayload } from "./api.js";

/** Format a double the way printf("%.17g") does. */
export function g17(x: number): string {
  if (x === 0) return Object.is(x, -0) ? "-0" : "0";
  if (!Number.isFinite(x)) return x > 0 ? "inf" : Number.isNaN(x) ? "nan" : "-inf";
  const sci = x.toExponential(16);
  const [mantissa, expPart] = sci.split("e");
  const exp = Number(expPart);
  if (exp < -4 || exp >= 17) {
    const m = trimZeros(mantissa);
    const sign = exp < 0 ? "-" : "+";
    const abs = String(Math.abs(exp)).padStart(2, "0");
    return `${m}e${sign}${abs}`;
  }
  return trimZeros(x.toFixed(Math.max(0, 16 - exp)));
}

function trimZeros(s: string): string {
  if (!s.includes(".")) return s;
  return s.replace(/0+$/, "").replace(/\.$/, "");
}

export function meshToObj(mesh: MeshPayload): string {
  const lines: string[] = [];
  for (const v of mesh.vertices) {
    lines.push(`v ${g17(v[0])} ${g17(v[1])} ${g17(v[2])}`);
  }
  for (const uv of mesh.uvs) {
    lines.push(`vt ${g17(uv[0])} ${g17(uv[1])}`);
  }
  for (const f of mesh.faces) {
    const [a, b, c] = [f[0] + 1, f[1] + 1, f[2] + 1];
    lines.push(`f ${a}/${a} ${b}/${b} ${c}/${c}`);
  }
  return lines.join("\n") + "\n";
}
