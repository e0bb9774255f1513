/** Wire-schema types for the render service (schema_version 1).
 *
 * Quaternions are [w, x, y, z] and unit length; coordinates are
 * right-handed, y-up. See docs/wire_schema.md in the Python package.
 */

export type Quat = [number, number, number, number];
export type Vec3 = [number, number, number];

export interface PoseJoint {
  index: number;
  quat: Quat;
}

export interface PoseDoc {
  root: { quat: Quat; translation: Vec3 };
  joints: PoseJoint[];
}

export interface CameraDoc {
  position: Vec3;
  target: Vec3;
  up?: Vec3;
  fov?: number;
  width?: number;
  height?: number;
}

export interface SkeletonNode {
  index: number;
  parent: number;
  joint: Vec3;
  children: number[];
}

export interface SkeletonDoc {
  version: number;
  root: number;
  nodes: SkeletonNode[];
}

export interface ModelDoc {
  schema_version: number;
  model_hash: string;
  skeleton: SkeletonDoc;
  superpoint_count: number;
  gaussian_count: number;
  bounding_box: { min: Vec3; max: Vec3 };
  timestamps: number[];
}

export interface ServiceError {
  error: string;
  field?: string;
}
