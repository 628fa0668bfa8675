/**
 * The controller behind the UI: routes slider edits through the debounced
 * sampler, applies responses atomically, and keeps the orbit camera strictly
 * client-side (orbiting re-renders but never talks to the service).
 */
import {
  DebouncedSampler,
  type ModelInfo,
  type SamplePayload,
  type Transport,
} from "./api.js";
import { renderMesh, type Framebuffer, type RawTexture } from "./raster.js";
import {
  applyFailure,
  applyPayload,
  initialState,
  orbit,
  sampleRequest,
  setSlider,
  setTextureSeed,
  setVector,
  type ViewerState,
} from "./state.js";

export interface ControllerOptions {
  windowMs?: number;
  now?: () => number;
  onChange?: (state: ViewerState) => void;
}

export class ViewerController {
  state: ViewerState;
  private readonly sampler: DebouncedSampler;
  private readonly notify: (state: ViewerState) => void;

  constructor(
    readonly info: ModelInfo,
    transport: Transport,
    endpoint: string,
    options: ControllerOptions = {},
  ) {
    this.state = initialState(info, endpoint);
    this.notify = options.onChange ?? (() => {});
    this.sampler = new DebouncedSampler(
      transport,
      (payload) => this.receive(payload),
      (error) => this.fail(error),
      options.windowMs,
      options.now,
    );
  }

  onSliderChange(group: "beta" | "psi", index: number, value: number): void {
    this.state = setSlider(this.state, group, index, value);
    this.issue();
  }

  onVectorEdit(group: "beta" | "psi", values: number[]): void {
    this.state = setVector(this.state, group, values);
    this.issue();
  }

  onTextureSeed(seed: number): void {
    this.state = setTextureSeed(this.state, seed);
    this.issue();
  }

  /** Orbit input: camera-only, no network traffic. */
  onOrbit(dYaw: number, dPitch: number, dZoom = 0): void {
    this.state = orbit(this.state, dYaw, dPitch, dZoom);
    this.notify(this.state);
  }

  refresh(): void {
    this.issue();
  }

  render(texture: RawTexture, size = 256): Framebuffer | null {
    const mesh = this.state.payload?.mesh;
    if (!mesh) return null;
    return renderMesh(mesh, texture, {
      yaw: this.state.camera.yaw,
      pitch: this.state.camera.pitch,
      zoom: this.state.camera.zoom,
      distance: this.info.camera_ranges.distance,
      size,
    });
  }

  private issue(): void {
    this.state = { ...this.state, requestInFlight: true };
    this.notify(this.state);
    this.sampler.request(sampleRequest(this.state));
  }

  private receive(payload: SamplePayload): void {
    this.state = applyPayload(this.state, payload);
    this.notify(this.state);
  }

  private fail(error: unknown): void {
    this.state = applyFailure(this.state, error);
    this.notify(this.state);
  }
}
