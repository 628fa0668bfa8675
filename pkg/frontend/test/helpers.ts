import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import type {
  ModelInfo,
  SamplePayload,
  SampleRequest,
  Transport,
} from "../src/api.js";
import type { RawTexture } from "../src/raster.js";

const FIXTURES = join(dirname(fileURLToPath(import.meta.url)), "fixtures");

export function fixturePath(name: string): string {
  return join(FIXTURES, name);
}

export function loadJson<T>(name: string): T {
  return JSON.parse(readFileSync(fixturePath(name), "utf8")) as T;
}

export const modelInfo = (): ModelInfo => loadJson<ModelInfo>("model_info.json");
export const sampleZero = (): SamplePayload => loadJson<SamplePayload>("sample_zero.json");
export const sampleBetaEdit = (): SamplePayload =>
  loadJson<SamplePayload>("sample_beta_edit.json");
export const sampleZseedEdit = (): SamplePayload =>
  loadJson<SamplePayload>("sample_zseed_edit.json");

export function zeroTexture(): RawTexture {
  const raw = loadJson<{ width: number; height: number; rgb_base64: string }>(
    "texture_zero_raw.json",
  );
  return {
    width: raw.width,
    height: raw.height,
    data: Uint8Array.from(Buffer.from(raw.rgb_base64, "base64")),
  };
}

/**
 * Transport that logs every request and answers from a lookup function;
 * responses can be held back and released manually to exercise ordering.
 */
export class RecordingTransport implements Transport {
  readonly log: SampleRequest[] = [];
  private held: Array<() => void> = [];
  holdResponses = false;

  constructor(
    private readonly lookup: (body: SampleRequest) => SamplePayload,
    private readonly info: ModelInfo = modelInfo(),
  ) {}

  getInfo(): Promise<ModelInfo> {
    return Promise.resolve(this.info);
  }

  postSample(body: SampleRequest): Promise<SamplePayload> {
    this.log.push(body);
    const payload = this.lookup(body);
    if (!this.holdResponses) return Promise.resolve(payload);
    return new Promise((resolve) => {
      this.held.push(() => resolve(payload));
    });
  }

  /** Resolve held responses in the given order (indices into the log). */
  release(...order: number[]): void {
    const held = this.held;
    this.held = [];
    for (const i of order) held[i]();
  }
}

/** Payload echoing the request back, for tracing which state produced it. */
export function echoPayload(body: SampleRequest): SamplePayload {
  return { params: { beta: body.beta, psi: body.psi, z_seed: body.z_seed } };
}
