import type { Quat, Vec3 } from "./types.js";

export const IDENTITY: Quat = [1, 0, 0, 0];

export function quatFromAxisAngle(axis: Vec3, angle: number): Quat {
  const n = Math.hypot(axis[0], axis[1], axis[2]);
  if (n === 0) return [...IDENTITY];
  const h = angle / 2;
  const s = Math.sin(h) / n;
  return [Math.cos(h), axis[0] * s, axis[1] * s, axis[2] * s];
}

export function quatMul(a: Quat, b: Quat): Quat {
  const [aw, ax, ay, az] = a;
  const [bw, bx, by, bz] = b;
  return [
    aw * bw - ax * bx - ay * by - az * bz,
    aw * bx + ax * bw + ay * bz - az * by,
    aw * by - ax * bz + ay * bw + az * bx,
    aw * bz + ax * by - ay * bx + az * bw,
  ];
}

/** Per-joint rotation from the three axis-angle sliders, applied as
 * rotate-about-x, then y, then z (q = qz * qy * qx). */
export function quatFromSliders(rx: number, ry: number, rz: number): Quat {
  const qx = quatFromAxisAngle([1, 0, 0], rx);
  const qy = quatFromAxisAngle([0, 1, 0], ry);
  const qz = quatFromAxisAngle([0, 0, 1], rz);
  return quatMul(qz, quatMul(qy, qx));
}
