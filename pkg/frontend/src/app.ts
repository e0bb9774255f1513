import { ServiceClient } from "./client.js";
import { PoseEditor } from "./editor.js";
import { Playback } from "./playback.js";
import type { CameraDoc, ModelDoc, SkeletonNode } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  cls?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  if (text !== undefined) node.textContent = text;
  return node;
}

function defaultCamera(model: ModelDoc): CameraDoc {
  const { min, max } = model.bounding_box;
  const center: [number, number, number] = [
    (min[0] + max[0]) / 2,
    (min[1] + max[1]) / 2,
    (min[2] + max[2]) / 2,
  ];
  const diag = Math.hypot(max[0] - min[0], max[1] - min[1], max[2] - min[2]) || 1;
  return {
    position: [center[0], center[1] + 0.5 * diag, center[2] + 1.6 * diag],
    target: center,
    width: 512,
    height: 512,
  };
}

function treePanel(model: ModelDoc, container: HTMLElement): void {
  container.textContent = "";
  const byIndex = new Map(model.skeleton.nodes.map((n) => [n.index, n]));
  const render = (index: number, depth: number): void => {
    const node = byIndex.get(index) as SkeletonNode;
    const row = el("div", "tree-node");
    row.style.paddingLeft = `${depth}em`;
    row.textContent =
      index === model.skeleton.root
        ? `superpoint ${index} (root)`
        : `superpoint ${index} @ [${node.joint.map((v) => v.toFixed(2)).join(", ")}]`;
    container.appendChild(row);
    for (const child of node.children) render(child, depth + 1);
  };
  render(model.skeleton.root, 0);
}

function pngUrl(buffer: ArrayBuffer): string {
  return URL.createObjectURL(new Blob([buffer], { type: "image/png" }));
}

export async function mount(root: HTMLElement, baseUrl: string): Promise<void> {
  const banner = el("div", "banner");
  const tree = el("div", "tree");
  const sliders = el("div", "sliders");
  const viewport = el("img", "viewport") as HTMLImageElement;
  const controls = el("div", "controls");
  root.append(banner, tree, sliders, viewport, controls);

  const showError = (message: string): void => {
    banner.textContent = message;
    banner.style.display = "block";
  };

  const client = new ServiceClient(baseUrl);
  let model: ModelDoc;
  try {
    model = await client.getModel();
  } catch (err) {
    showError(`service unreachable: ${err instanceof Error ? err.message : err}`);
    const retry = el("button", "retry", "retry");
    retry.onclick = () => {
      root.textContent = "";
      void mount(root, baseUrl);
    };
    banner.appendChild(retry);
    return;
  }

  const camera = defaultCamera(model);
  const editor = new PoseEditor(client, camera, {
    onFrame: (png) => {
      viewport.src = pngUrl(png);
    },
    onError: showError,
  });
  editor.model = model;
  editor.reset();
  treePanel(model, tree);

  for (const index of editor.jointIndices()) {
    const group = el("div", "joint-group", `joint ${index}`);
    for (const axis of ["rx", "ry", "rz"] as const) {
      const slider = el("input") as HTMLInputElement;
      slider.type = "range";
      slider.min = String(-Math.PI);
      slider.max = String(Math.PI);
      slider.step = "0.01";
      slider.value = "0";
      slider.oninput = () => {
        banner.style.display = "none";
        editor.editPose(index, { [axis]: Number(slider.value) });
      };
      group.appendChild(slider);
    }
    sliders.appendChild(group);
  }

  const reset = el("button", "reset", "reset");
  reset.onclick = () => {
    editor.reset();
    editor.submit(editor.buildPoseDoc());
  };
  controls.appendChild(reset);

  const playback = new Playback(client, camera);
  const scrubber = el("input") as HTMLInputElement;
  scrubber.type = "range";
  const ts = model.timestamps;
  scrubber.min = String(ts[0] ?? 0);
  scrubber.max = String(ts[ts.length - 1] ?? 1);
  scrubber.step = "any";
  scrubber.oninput = () => {
    void playback
      .scrub(Number(scrubber.value))
      .then((png) => {
        viewport.src = pngUrl(png);
      })
      .catch((err) => showError(String(err)));
  };
  controls.appendChild(scrubber);

  // first frame: the canonical pose
  editor.submit(editor.buildPoseDoc());
}
