import { ServiceClient } from "./client.js";
import { IDENTITY, quatFromSliders } from "./quat.js";
import type { CameraDoc, ModelDoc, PoseDoc, Quat, Vec3 } from "./types.js";

export interface SliderState {
  rx: number;
  ry: number;
  rz: number;
}

export const DEBOUNCE_MS = 60;

type Scheduler = (fn: () => void, ms: number) => unknown;
type Canceler = (handle: unknown) => void;

export interface EditorOptions {
  debounceMs?: number;
  setTimeoutImpl?: Scheduler;
  clearTimeoutImpl?: Canceler;
  /** Receives every presented frame, in presentation order. */
  onFrame?: (png: ArrayBuffer, sequence: number) => void;
  onError?: (message: string) => void;
}

/** Pose editing state plus the render pipeline contract: debounced input,
 * sequence-numbered requests, at most one in flight, queued-latest-wins,
 * and stale responses never presented. */
export class PoseEditor {
  model: ModelDoc | null = null;
  sliders = new Map<number, SliderState>();
  rootQuat: Quat = [...IDENTITY];
  rootTranslation: Vec3 = [0, 0, 0];
  camera: CameraDoc;

  private readonly debounceMs: number;
  private readonly setTimeoutImpl: Scheduler;
  private readonly clearTimeoutImpl: Canceler;
  private readonly onFrame: (png: ArrayBuffer, sequence: number) => void;
  private readonly onError: (message: string) => void;

  private debounceHandle: unknown = null;
  private nextSequence = 0;
  private presentedSequence = -1;
  private inFlight = false;
  private queued: PoseDoc | null = null;
  private idleResolvers: (() => void)[] = [];

  constructor(
    readonly client: ServiceClient,
    camera: CameraDoc,
    options: EditorOptions = {},
  ) {
    this.camera = camera;
    this.debounceMs = options.debounceMs ?? DEBOUNCE_MS;
    this.setTimeoutImpl = options.setTimeoutImpl ?? ((fn, ms) => setTimeout(fn, ms));
    this.clearTimeoutImpl = options.clearTimeoutImpl ?? ((h) => clearTimeout(h as number));
    this.onFrame = options.onFrame ?? (() => undefined);
    this.onError = options.onError ?? (() => undefined);
  }

  async loadModel(): Promise<ModelDoc> {
    this.model = await this.client.getModel();
    this.reset();
    return this.model;
  }

  /** Non-root joint indices, ordered; one slider group each. */
  jointIndices(): number[] {
    if (!this.model) return [];
    const root = this.model.skeleton.root;
    return this.model.skeleton.nodes
      .map((n) => n.index)
      .filter((i) => i !== root)
      .sort((a, b) => a - b);
  }

  reset(): void {
    this.sliders = new Map(this.jointIndices().map((i) => [i, { rx: 0, ry: 0, rz: 0 }]));
    this.rootQuat = [...IDENTITY];
    this.rootTranslation = [0, 0, 0];
  }

  /** The canonical (identity) pose document for the loaded skeleton. */
  buildPoseDoc(): PoseDoc {
    return {
      root: { quat: [...this.rootQuat], translation: [...this.rootTranslation] },
      joints: this.jointIndices().map((index) => {
        const s = this.sliders.get(index) ?? { rx: 0, ry: 0, rz: 0 };
        return { index, quat: quatFromSliders(s.rx, s.ry, s.rz) };
      }),
    };
  }

  /** Slider input: debounced, then submitted through the render queue. */
  editPose(joint: number, angles: Partial<SliderState>): void {
    const s = this.sliders.get(joint);
    if (!s) {
      this.onError(`unknown joint ${joint}`);
      return;
    }
    Object.assign(s, angles);
    if (this.debounceHandle !== null) this.clearTimeoutImpl(this.debounceHandle);
    this.debounceHandle = this.setTimeoutImpl(() => {
      this.debounceHandle = null;
      this.submit(this.buildPoseDoc());
    }, this.debounceMs);
  }

  /** Render immediately (reset button, programmatic pose changes). */
  submit(pose: PoseDoc): void {
    if (this.inFlight) {
      this.queued = pose; // latest-wins: any previously queued pose is dropped
      return;
    }
    void this.dispatch(pose);
  }

  private async dispatch(pose: PoseDoc): Promise<void> {
    const sequence = this.nextSequence++;
    this.inFlight = true;
    try {
      const png = await this.client.render(pose, this.camera);
      // a newer frame may already be on screen; never go backwards
      if (sequence > this.presentedSequence) {
        this.presentedSequence = sequence;
        this.onFrame(png, sequence);
      }
    } catch (err) {
      this.onError(err instanceof Error ? err.message : String(err));
    } finally {
      this.inFlight = false;
      const queued = this.queued;
      this.queued = null;
      if (queued) {
        void this.dispatch(queued);
      } else {
        for (const resolve of this.idleResolvers.splice(0)) resolve();
      }
    }
  }

  /** Resolves once no request is in flight and nothing is queued. */
  idle(): Promise<void> {
    if (!this.inFlight && !this.queued) return Promise.resolve();
    return new Promise((resolve) => this.idleResolvers.push(resolve));
  }
}

/** Depth of the skeleton tree in a model document (root = depth 0). */
export function skeletonDepth(model: ModelDoc): number {
  const byIndex = new Map(model.skeleton.nodes.map((n) => [n.index, n]));
  let deepest = 0;
  for (const node of model.skeleton.nodes) {
    let depth = 0;
    let cur = node;
    while (cur.index !== model.skeleton.root) {
      const parent = byIndex.get(cur.parent);
      if (!parent) throw new Error(`node ${cur.index} has unknown parent`);
      cur = parent;
      depth += 1;
    }
    deepest = Math.max(deepest, depth);
  }
  return deepest;
}
