/* tslint:disable */
/* eslint-disable */

/**
 * Grey-scale images for the page, each with a caption.
 */
export class Panels {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    count(): number;
    height(i: number): number;
    label(i: number): string;
    /**
     * The numbers behind the note, in the order it lists them.
     */
    metrics(): Float64Array;
    note(): string;
    /**
     * RGBA bytes, values clamped to [0, 1] before scaling.
     */
    rgba(i: number): Uint8Array;
    width(i: number): number;
}

export function attention_heatmaps(seed: bigint, id: bigint, model_seed: bigint, rotation_deg: number, tx: number, ty: number, brightness: number): Panels;

export function equivariance(seed: bigint, id: bigint, res: number, quarters: number): Panels;

export function views(seed: bigint, id: bigint, res: number, rotation_deg: number, tx: number, ty: number, brightness: number): Panels;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_panels_free: (a: number, b: number) => void;
    readonly attention_heatmaps: (a: bigint, b: bigint, c: bigint, d: number, e: number, f: number, g: number) => [number, number, number];
    readonly equivariance: (a: bigint, b: bigint, c: number, d: number) => [number, number, number];
    readonly panels_count: (a: number) => number;
    readonly panels_height: (a: number, b: number) => number;
    readonly panels_label: (a: number, b: number) => [number, number];
    readonly panels_metrics: (a: number) => [number, number];
    readonly panels_note: (a: number) => [number, number];
    readonly panels_rgba: (a: number, b: number) => [number, number];
    readonly panels_width: (a: number, b: number) => number;
    readonly views: (a: bigint, b: bigint, c: number, d: number, e: number, f: number, g: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
