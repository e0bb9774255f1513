import { ServiceClient } from "./client.js";
import type { CameraDoc, PoseDoc } from "./types.js";

export interface PlaybackOptions {
  fps?: number;
  /** Frames rendered per keyframe segment (including both endpoints). */
  framesPerSegment?: number;
  onFrame?: (png: ArrayBuffer, frame: number) => void;
  onError?: (message: string) => void;
}

/** Keyframe playback: the service slerps each pose and renders each frame;
 * the client only schedules. At most one request at a time. */
export class Playback {
  private playing = false;
  private stopRequested = false;

  constructor(
    readonly client: ServiceClient,
    readonly camera: CameraDoc,
  ) {}

  get isPlaying(): boolean {
    return this.playing;
  }

  pause(): void {
    this.stopRequested = true;
  }

  /** Renders every playback frame in order; resolves when done or paused.
   * Returns the number of frames presented. */
  async play(keyframes: PoseDoc[], options: PlaybackOptions = {}): Promise<number> {
    if (keyframes.length < 2) throw new Error("playback needs at least 2 keyframes");
    if (this.playing) return 0; // resume while playing must not duplicate requests
    const frames = options.framesPerSegment ?? 10;
    const onFrame = options.onFrame ?? (() => undefined);
    const onError = options.onError ?? (() => undefined);
    this.playing = true;
    this.stopRequested = false;
    let presented = 0;
    try {
      for (let seg = 0; seg + 1 < keyframes.length; seg++) {
        for (let f = 0; f < frames; f++) {
          if (this.stopRequested) return presented;
          const u = f / (frames - 1);
          const pose = await this.client.interpolate(keyframes[seg], keyframes[seg + 1], u);
          const png = await this.client.render(pose, this.camera);
          onFrame(png, presented);
          presented += 1;
        }
      }
      return presented;
    } catch (err) {
      onError(err instanceof Error ? err.message : String(err));
      return presented;
    } finally {
      this.playing = false;
    }
  }

  /** Timeline scrub: replay the recovered training pose at time t. */
  async scrub(t: number): Promise<ArrayBuffer> {
    const pose = await this.client.poseAt(t);
    return this.client.render(pose, this.camera);
  }
}
