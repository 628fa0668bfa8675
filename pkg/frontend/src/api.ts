/**
 * Typed client for the two model-service endpoints, plus the debounced
 * sampler that serializes slider traffic: at most one POST per debounce
 * window, latest state wins, stale responses dropped by sequence number.
 */

export interface ModelInfo {
  k_beta: number;
  k_psi: number;
  k_z: number;
  render_size: number;
  texture_resolution: number;
  style: string;
  checkpoint_hash: string;
  camera_ranges: {
    yaw: [number, number];
    pitch: [number, number];
    distance: number;
  };
}

export interface MeshPayload {
  vertices: number[][];
  faces: number[][];
  uvs: number[][];
  landmark_vertices: number[];
}

export type OutputSelector = "mesh" | "texture" | "render" | "all";

export interface SampleRequest {
  beta?: number[];
  psi?: number[];
  z?: number[];
  z_seed?: number;
  yaw?: number;
  pitch?: number;
  output?: OutputSelector;
}

export interface SamplePayload {
  params: Record<string, unknown>;
  mesh?: MeshPayload;
  texture_png?: string;
  render_png?: string;
}

export interface Transport {
  getInfo(): Promise<ModelInfo>;
  postSample(body: SampleRequest): Promise<SamplePayload>;
}

export class HttpTransport implements Transport {
  constructor(private readonly baseUrl: string) {}

  async getInfo(): Promise<ModelInfo> {
    const res = await fetch(`${this.baseUrl}/model/info`);
    if (!res.ok) throw new Error(`GET /model/info -> ${res.status}`);
    return (await res.json()) as ModelInfo;
  }

  async postSample(body: SampleRequest): Promise<SamplePayload> {
    const res = await fetch(`${this.baseUrl}/sample`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!res.ok) throw new Error(`POST /sample -> ${res.status}`);
    return (await res.json()) as SamplePayload;
  }
}

export const DEBOUNCE_MS = 80;

/**
 * Coalesces rapid request bursts. The first request in a quiet period goes
 * out immediately; anything arriving inside the debounce window replaces the
 * pending body and is sent on the trailing edge. Responses are applied only
 * if no newer request has been issued since.
 */
export class DebouncedSampler {
  private seq = 0;
  private applied = 0;
  private pending: SampleRequest | null = null;
  private timer: ReturnType<typeof setTimeout> | null = null;
  private lastSent = Number.NEGATIVE_INFINITY;

  constructor(
    private readonly transport: Transport,
    private readonly onPayload: (payload: SamplePayload, body: SampleRequest) => void,
    private readonly onError: (error: unknown) => void = () => {},
    private readonly windowMs: number = DEBOUNCE_MS,
    private readonly now: () => number = Date.now,
  ) {}

  /** True while a request is scheduled or awaiting its response. */
  get inFlight(): boolean {
    return this.timer !== null || this.seq > this.applied;
  }

  request(body: SampleRequest): void {
    this.pending = body;
    if (this.timer !== null) return;
    const wait = Math.max(0, this.lastSent + this.windowMs - this.now());
    this.timer = setTimeout(() => this.flush(), wait);
  }

  private flush(): void {
    this.timer = null;
    if (this.pending === null) return;
    const body = this.pending;
    this.pending = null;
    this.lastSent = this.now();
    const id = ++this.seq;
    this.transport.postSample(body).then(
      (payload) => {
        if (id > this.applied) {
          this.applied = id;
          this.onPayload(payload, body);
        }
      },
      (error) => {
        if (id > this.applied) {
          this.applied = id;
          this.onError(error);
        }
      },
    );
  }
}
