/**
 * Typed client for the local preview service.
 *
 * The studio talks to the service exclusively over this HTTP surface; it
 * never touches project files itself.  All mutation goes through PATCH
 * /state so the server stays the single validator of project state.
 */

/** Decomposed registration parameters as the service reports them. */
export interface RegistrationParams {
    rotation_deg: number;
    scale_x_px: number;
    scale_y_px: number;
    skew_px: number;
    dx_px: number;
    dy_px: number;
    perspective_x: number;
    perspective_y: number;
    k1: number;
    k2: number;
}

export interface ScanInfo {
    width: number;
    height: number;
    ppi: number;
}

export interface StatePayload {
    version: number;
    path: string | null;
    registered: boolean;
    scan: ScanInfo;
    registration: RegistrationParams | null;
    project: Record<string, unknown>;
}

/** Body accepted by PATCH /state; every section is optional. */
export interface StatePatch {
    registration?: Partial<RegistrationParams>;
    registration_delta?: Partial<RegistrationParams>;
    render?: Record<string, unknown>;
    inversion?: Record<string, unknown>;
    sharpen?: Record<string, unknown>;
    mix?: Record<string, unknown>;
}

export interface RegisterAutoResult {
    registration: RegistrationParams;
    objective: number;
    marks_found: number;
    candidates_scored: number;
}

export type Stage = 'scan' | 'screen_sim' | 'demosaic' | 'final';

/** Viewport rectangle in scan pixels plus the output scale factor. */
export interface TileRequest {
    x: number;
    y: number;
    w: number;
    h: number;
    zoom: number;
    stage: Stage;
}

/** Raised for structured error bodies ({error, detail}) from the service. */
export class ServiceError extends Error {
    constructor(
        public readonly status: number,
        public readonly kind: string,
        detail: string
    ) {
        super(detail);
    }
}

/** Raised when the service cannot be reached at all (connection refused). */
export class ServiceUnreachable extends Error {}

export interface StudioApi {
    getState(): Promise<StatePayload>;
    patchState(patch: StatePatch): Promise<StatePayload>;
    getTile(req: TileRequest): Promise<ArrayBuffer>;
    registerAuto(): Promise<RegisterAutoResult>;
    save(): Promise<{ saved: string }>;
}

async function parseError(res: Response): Promise<never> {
    let kind = 'ServiceError';
    let detail = `HTTP ${res.status}`;
    try {
        const body = await res.json();
        if (body && typeof body.error === 'string') kind = body.error;
        if (body && typeof body.detail === 'string') detail = body.detail;
    } catch {
        // non-JSON body; keep the status line
    }
    throw new ServiceError(res.status, kind, detail);
}

/**
 * Service client over fetch.  A custom fetch function can be injected for
 * tests; network-level failures surface as ServiceUnreachable so the studio
 * can keep local state and queue the edit.
 */
export class HttpStudioApi implements StudioApi {
    constructor(
        private readonly base: string,
        private readonly fetchFn: typeof fetch = fetch
    ) {}

    private async request(path: string, init?: RequestInit): Promise<Response> {
        let res: Response;
        try {
            res = await this.fetchFn(this.base + path, init);
        } catch (err) {
            throw new ServiceUnreachable(String(err));
        }
        if (!res.ok) await parseError(res);
        return res;
    }

    async getState(): Promise<StatePayload> {
        return (await this.request('/state')).json();
    }

    async patchState(patch: StatePatch): Promise<StatePayload> {
        const res = await this.request('/state', {
            method: 'PATCH',
            headers: { 'Content-Type': 'application/json' },
            body: JSON.stringify(patch),
        });
        return res.json();
    }

    async getTile(req: TileRequest): Promise<ArrayBuffer> {
        const q = new URLSearchParams({
            x: String(req.x),
            y: String(req.y),
            w: String(req.w),
            h: String(req.h),
            zoom: String(req.zoom),
            stage: req.stage,
        });
        return (await this.request(`/tile?${q}`)).arrayBuffer();
    }

    async registerAuto(): Promise<RegisterAutoResult> {
        return (await this.request('/register/auto', { method: 'POST' })).json();
    }

    async save(): Promise<{ saved: string }> {
        return (await this.request('/save', { method: 'POST' })).json();
    }
}
