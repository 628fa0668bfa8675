/**
 * Browser entry point: builds the slider panel from /model/info, draws the
 * textured mesh into a canvas, and wires orbit dragging. Everything model-
 * related happens in viewer.ts / state.ts; this file is DOM glue only.
 */
import { HttpTransport } from "./api.js";
import { EXPOSED_COMPONENTS, SLIDER_MAX, SLIDER_MIN } from "./state.js";
import { ViewerController } from "./viewer.js";
import type { RawTexture } from "./raster.js";

const CANVAS_SIZE = 384;

async function decodeTexture(pngBase64: string): Promise<RawTexture> {
  const bytes = Uint8Array.from(atob(pngBase64), (c) => c.charCodeAt(0));
  const bitmap = await createImageBitmap(new Blob([bytes], { type: "image/png" }));
  const canvas = document.createElement("canvas");
  canvas.width = bitmap.width;
  canvas.height = bitmap.height;
  const ctx = canvas.getContext("2d")!;
  ctx.drawImage(bitmap, 0, 0);
  const rgba = ctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
  const rgb = new Uint8Array(bitmap.width * bitmap.height * 3);
  for (let i = 0; i < bitmap.width * bitmap.height; i++) {
    rgb[3 * i] = rgba[4 * i];
    rgb[3 * i + 1] = rgba[4 * i + 1];
    rgb[3 * i + 2] = rgba[4 * i + 2];
  }
  return { width: bitmap.width, height: bitmap.height, data: rgb };
}

function slider(label: string, oninput: (value: number) => void): HTMLElement {
  const row = document.createElement("label");
  row.className = "slider-row";
  const input = document.createElement("input");
  input.type = "range";
  input.min = String(SLIDER_MIN);
  input.max = String(SLIDER_MAX);
  input.step = "0.05";
  input.value = "0";
  input.addEventListener("input", () => oninput(Number(input.value)));
  row.append(label, input);
  return row;
}

async function boot(): Promise<void> {
  const endpoint = new URLSearchParams(location.search).get("api") ?? "";
  const transport = new HttpTransport(endpoint);
  const info = await transport.getInfo();

  const canvas = document.getElementById("view") as HTMLCanvasElement;
  canvas.width = canvas.height = CANVAS_SIZE;
  const ctx = canvas.getContext("2d")!;
  const banner = document.getElementById("banner")!;
  const stats = document.getElementById("stats")!;
  let texture: RawTexture | null = null;

  const controller = new ViewerController(info, transport, endpoint, {
    onChange: (state) => {
      banner.textContent = state.banner ?? "";
      banner.hidden = state.banner === null;
      const mesh = state.payload?.mesh;
      if (mesh) {
        stats.textContent =
          `${mesh.vertices.length} vertices / ${mesh.faces.length} faces — ${info.style}`;
      }
      void repaint(state.payload?.texture_png);
    },
  });

  async function repaint(texturePng: string | undefined): Promise<void> {
    if (texturePng) texture = await decodeTexture(texturePng);
    if (!texture) return;
    const fb = controller.render(texture, CANVAS_SIZE);
    if (fb) {
      const pixels = new Uint8ClampedArray(fb.data);
      ctx.putImageData(new ImageData(pixels, fb.width, fb.height), 0, 0);
    }
  }

  const panel = document.getElementById("sliders")!;
  for (const group of ["beta", "psi"] as const) {
    const k = group === "beta" ? info.k_beta : info.k_psi;
    for (let i = 0; i < Math.min(EXPOSED_COMPONENTS, k); i++) {
      panel.append(slider(`${group === "beta" ? "shape" : "expr"} ${i}`, (v) =>
        controller.onSliderChange(group, i, v)));
    }
  }
  const seed = document.getElementById("seed") as HTMLInputElement;
  seed.addEventListener("change", () => controller.onTextureSeed(Number(seed.value)));

  let dragging = false;
  canvas.addEventListener("pointerdown", () => (dragging = true));
  window.addEventListener("pointerup", () => (dragging = false));
  canvas.addEventListener("pointermove", (e) => {
    if (dragging) controller.onOrbit(e.movementX * 0.01, e.movementY * 0.01);
  });
  canvas.addEventListener("wheel", (e) => {
    e.preventDefault();
    controller.onOrbit(0, 0, -e.deltaY * 0.001);
  });

  controller.refresh();
}

void boot();
