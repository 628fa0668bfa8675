/**
 * Minimal software renderer for the textured mesh payload: perspective
 * projection, z-buffered triangle rasterization, nearest-texel UV lookup.
 * Pure functions over typed arrays so the render path is testable in Node
 * and identical pixels come out on every platform.
 */
import type { MeshPayload } from "./api.js";

export interface RawTexture {
  width: number;
  height: number;
  /** Row-major RGB bytes. */
  data: Uint8Array;
}

export interface Framebuffer {
  width: number;
  height: number;
  /** Row-major RGBA bytes. */
  data: Uint8ClampedArray;
}

export interface ViewParams {
  yaw: number;
  pitch: number;
  zoom: number;
  distance: number;
  size: number;
}

const BACKGROUND: [number, number, number] = [24, 26, 32];

export function renderMesh(
  mesh: MeshPayload,
  texture: RawTexture,
  view: ViewParams,
): Framebuffer {
  const { size } = view;
  const fb: Framebuffer = {
    width: size,
    height: size,
    data: new Uint8ClampedArray(size * size * 4),
  };
  for (let i = 0; i < size * size; i++) {
    fb.data[4 * i] = BACKGROUND[0];
    fb.data[4 * i + 1] = BACKGROUND[1];
    fb.data[4 * i + 2] = BACKGROUND[2];
    fb.data[4 * i + 3] = 255;
  }
  const zbuf = new Float64Array(size * size).fill(Number.POSITIVE_INFINITY);

  const cy = Math.cos(view.yaw);
  const sy = Math.sin(view.yaw);
  const cp = Math.cos(view.pitch);
  const sp = Math.sin(view.pitch);
  const focal = 1.4 * size * view.zoom;
  const n = mesh.vertices.length;
  const xs = new Float64Array(n);
  const ys = new Float64Array(n);
  const zs = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    const [x, y, z] = mesh.vertices[i];
    // yaw about +y, then pitch about +x, then push away from the camera
    const x1 = cy * x + sy * z;
    const z1 = -sy * x + cy * z;
    const y2 = cp * y - sp * z1;
    const z2 = sp * y + cp * z1 + view.distance;
    xs[i] = focal * (x1 / z2) + size / 2;
    ys[i] = size / 2 - focal * (y2 / z2);
    zs[i] = z2;
  }

  for (const [ia, ib, ic] of mesh.faces) {
    rasterize(fb, zbuf, mesh, texture, ia, ib, ic, xs, ys, zs);
  }
  return fb;
}

function rasterize(
  fb: Framebuffer,
  zbuf: Float64Array,
  mesh: MeshPayload,
  tex: RawTexture,
  ia: number,
  ib: number,
  ic: number,
  xs: Float64Array,
  ys: Float64Array,
  zs: Float64Array,
): void {
  const ax = xs[ia], ay = ys[ia];
  const bx = xs[ib], by = ys[ib];
  const cx = xs[ic], cy = ys[ic];
  const area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
  if (Math.abs(area) < 1e-12) return;
  const minX = Math.max(0, Math.floor(Math.min(ax, bx, cx)));
  const maxX = Math.min(fb.width - 1, Math.ceil(Math.max(ax, bx, cx)));
  const minY = Math.max(0, Math.floor(Math.min(ay, by, cy)));
  const maxY = Math.min(fb.height - 1, Math.ceil(Math.max(ay, by, cy)));
  for (let py = minY; py <= maxY; py++) {
    for (let px = minX; px <= maxX; px++) {
      const x = px + 0.5;
      const y = py + 0.5;
      const wa = ((bx - x) * (cy - y) - (by - y) * (cx - x)) / area;
      const wb = ((cx - x) * (ay - y) - (cy - y) * (ax - x)) / area;
      const wc = 1 - wa - wb;
      if (wa < 0 || wb < 0 || wc < 0) continue;
      const depth = wa * zs[ia] + wb * zs[ib] + wc * zs[ic];
      const idx = py * fb.width + px;
      if (depth >= zbuf[idx]) continue;
      zbuf[idx] = depth;
      const u = wa * mesh.uvs[ia][0] + wb * mesh.uvs[ib][0] + wc * mesh.uvs[ic][0];
      const v = wa * mesh.uvs[ia][1] + wb * mesh.uvs[ib][1] + wc * mesh.uvs[ic][1];
      const tx = Math.min(tex.width - 1, Math.max(0, Math.floor(u * tex.width)));
      const ty = Math.min(tex.height - 1, Math.max(0, Math.floor(v * tex.height)));
      const t = (ty * tex.width + tx) * 3;
      fb.data[4 * idx] = tex.data[t];
      fb.data[4 * idx + 1] = tex.data[t + 1];
      fb.data[4 * idx + 2] = tex.data[t + 2];
      fb.data[4 * idx + 3] = 255;
    }
  }
}

/**
 * 64-bit average hash over an 8x8 grayscale downsample, as a 16-hex-digit
 * string; small Hamming distances mean perceptually similar images.
 */
export function averageHash(fb: Framebuffer): string {
  const cells = new Float64Array(64);
  const counts = new Float64Array(64);
  for (let y = 0; y < fb.height; y++) {
    const gy = Math.min(7, Math.floor((y * 8) / fb.height));
    for (let x = 0; x < fb.width; x++) {
      const gx = Math.min(7, Math.floor((x * 8) / fb.width));
      const i = (y * fb.width + x) * 4;
      const gray = 0.299 * fb.data[i] + 0.587 * fb.data[i + 1] + 0.114 * fb.data[i + 2];
      cells[gy * 8 + gx] += gray;
      counts[gy * 8 + gx] += 1;
    }
  }
  let mean = 0;
  for (let i = 0; i < 64; i++) {
    cells[i] /= Math.max(1, counts[i]);
    mean += cells[i] / 64;
  }
  let bits = 0n;
  for (let i = 0; i < 64; i++) {
    if (cells[i] > mean) bits |= 1n << BigInt(i);
  }
  return bits.toString(16).padStart(16, "0");
}

export function hammingDistance(a: string, b: string): number {
  let diff = BigInt(`0x${a}`) ^ BigInt(`0x${b}`);
  let count = 0;
  while (diff) {
    count += Number(diff & 1n);
    diff >>= 1n;
  }
  return count;
}
