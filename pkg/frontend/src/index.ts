export { ServiceClient, ServiceRequestError } from "./client.js";
export { PoseEditor, skeletonDepth, DEBOUNCE_MS } from "./editor.js";
export { Playback } from "./playback.js";
export { quatFromAxisAngle, quatFromSliders, quatMul, IDENTITY } from "./quat.js";
export type * from "./types.js";
export { mount } from "./app.js";
