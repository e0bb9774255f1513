import type { CameraDoc, ModelDoc, PoseDoc, ServiceError } from "./types.js";

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
  arrayBuffer(): Promise<ArrayBuffer>;
}>;

export class ServiceRequestError extends Error {
  constructor(
    readonly status: number,
    readonly detail: ServiceError,
  ) {
    super(detail.field ? `${detail.error} (${detail.field})` : detail.error);
  }
}

async function fail(status: number, res: { json(): Promise<unknown> }): Promise<never> {
  let detail: ServiceError = { error: `http ${status}` };
  try {
    detail = (await res.json()) as ServiceError;
  } catch {
    /* non-JSON error body; keep the status-only message */
  }
  throw new ServiceRequestError(status, detail);
}

/** Thin typed wrapper over the render service; the UI computes no
 * kinematics itself, so every pixel and pose comes from here. */
export class ServiceClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = fetch as unknown as FetchLike,
  ) {}

  private async post(path: string, body: unknown): Promise<ArrayBuffer> {
    const res = await this.fetchImpl(this.baseUrl + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!res.ok) await fail(res.status, res);
    return res.arrayBuffer();
  }

  async getModel(): Promise<ModelDoc> {
    const res = await this.fetchImpl(this.baseUrl + "/model");
    if (!res.ok) await fail(res.status, res);
    return (await res.json()) as ModelDoc;
  }

  /** PNG bytes for an explicit pose. */
  render(pose: PoseDoc, camera: CameraDoc, background?: [number, number, number]): Promise<ArrayBuffer> {
    const body: Record<string, unknown> = { pose, camera };
    if (background) body.background = background;
    return this.post("/render", body);
  }

  /** Slerped pose between two poses at u in [0, 1]. */
  async interpolate(poseA: PoseDoc, poseB: PoseDoc, u: number): Promise<PoseDoc> {
    const res = await this.fetchImpl(this.baseUrl + "/interpolate", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ pose_a: poseA, pose_b: poseB, u }),
    });
    if (!res.ok) await fail(res.status, res);
    const doc = (await res.json()) as { pose: PoseDoc };
    return doc.pose;
  }

  /** Recovered training pose at time t. */
  async poseAt(t: number): Promise<PoseDoc> {
    const res = await this.fetchImpl(this.baseUrl + `/pose?t=${t}`);
    if (!res.ok) await fail(res.status, res);
    const doc = (await res.json()) as { pose: PoseDoc };
    return doc.pose;
  }
}
