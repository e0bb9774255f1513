import type { FetchLike } from "../src/client.js";
import type { ModelDoc, PoseDoc } from "../src/types.js";

export const MODEL: ModelDoc = {
  schema_version: 1,
  model_hash: "abc123",
  skeleton: {
    version: 1,
    root: 0,
    nodes: [
      { index: 0, parent: 0, joint: [0, 0, 0], children: [1] },
      { index: 1, parent: 0, joint: [1, 0, 0], children: [2] },
      { index: 2, parent: 1, joint: [2, 0, 0], children: [] },
    ],
  },
  superpoint_count: 3,
  gaussian_count: 40,
  bounding_box: { min: [0, 0, 0], max: [3, 1, 1] },
  timestamps: [0, 0.5, 1],
};

export interface Call {
  url: string;
  body?: unknown;
}

/** Deterministic in-memory service. Render responses encode the request
 * body so tests can tell frames apart; optional per-request latency
 * control lets tests resolve responses out of order. */
export class MockService {
  calls: Call[] = [];
  private pending: { resolve: () => void; id: number }[] = [];
  private counter = 0;
  manual = false;

  /** Release the oldest pending render; returns false when none remain. */
  release(): boolean {
    const next = this.pending.shift();
    if (!next) return false;
    next.resolve();
    return true;
  }

  get pendingCount(): number {
    return this.pending.length;
  }

  fetch: FetchLike = async (url, init) => {
    const body = init?.body ? JSON.parse(init.body) : undefined;
    this.calls.push({ url, body });
    const respond = (status: number, payload: unknown, bytes?: Uint8Array) => ({
      ok: status < 400,
      status,
      json: async () => payload,
      arrayBuffer: async () => (bytes ?? new Uint8Array()).buffer as ArrayBuffer,
    });

    if (url.endsWith("/model")) return respond(200, MODEL);

    if (url.includes("/pose?t=")) {
      const t = Number(url.split("t=")[1]);
      const pose: PoseDoc = {
        root: { quat: [1, 0, 0, 0], translation: [t, 0, 0] },
        joints: [
          { index: 1, quat: [Math.cos(t / 2), 0, 0, Math.sin(t / 2)] },
          { index: 2, quat: [1, 0, 0, 0] },
        ],
      };
      return respond(200, { schema_version: 1, t, pose });
    }

    if (url.endsWith("/interpolate")) {
      const doc = body as { pose_a: PoseDoc; pose_b: PoseDoc; u: number };
      if (doc.u < 0 || doc.u > 1) {
        return respond(400, { error: "expected a value in [0, 1]", field: "body.u" });
      }
      // endpoint-exact: u=0 and u=1 return the keyframes unchanged
      const pose = doc.u === 0 ? doc.pose_a : doc.u === 1 ? doc.pose_b : mix(doc);
      return respond(200, { schema_version: 1, pose });
    }

    if (url.endsWith("/render")) {
      const doc = body as { pose: PoseDoc };
      const badJoint = doc.pose.joints.find(
        (j) => !MODEL.skeleton.nodes.some((n) => n.index === j.index && n.index !== 0),
      );
      if (badJoint) {
        return respond(422, {
          error: `joint index ${badJoint.index} not in skeleton`,
          field: "pose.joints",
        });
      }
      const bytes = new TextEncoder().encode(JSON.stringify(body));
      const id = this.counter++;
      if (this.manual) {
        await new Promise<void>((resolve) => this.pending.push({ resolve, id }));
      }
      return respond(200, undefined, bytes);
    }

    return respond(404, { error: "no such endpoint" });
  };
}

function mix(doc: { pose_a: PoseDoc; pose_b: PoseDoc; u: number }): PoseDoc {
  // placeholder midpoint (the real service slerps); linear is fine for tests
  const lerp = (a: number, b: number) => a + (b - a) * doc.u;
  return {
    root: {
      quat: doc.pose_a.root.quat.map((v, i) => lerp(v, doc.pose_b.root.quat[i])) as PoseDoc["root"]["quat"],
      translation: doc.pose_a.root.translation.map((v, i) =>
        lerp(v, doc.pose_b.root.translation[i]),
      ) as PoseDoc["root"]["translation"],
    },
    joints: doc.pose_a.joints.map((j, k) => ({
      index: j.index,
      quat: j.quat.map((v, i) => lerp(v, doc.pose_b.joints[k].quat[i])) as PoseDoc["root"]["quat"],
    })),
  };
}

export function decodeFrame(png: ArrayBuffer): unknown {
  return JSON.parse(new TextDecoder().decode(png));
}
