"""Deterministic, seedable 2D driving world: kinematic bicycle dynamics,
scenario maps, a rasterizing forward camera, weather corruption, safe-set
membership, a pure-pursuit autopilot, and the monitored episode loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .datasets import ImageDataset
from .geometry import Path, PathBuilder, Rect, rects_overlap, wrap_angle
from .uncertainty import ConfidenceReport, steering_to_class

# Vehicle parameters (ordinary passenger-car figures)
WHEELBASE = 2.7        # m
DELTA_MAX = 0.5236     # rad, max road-wheel angle at steering = +/-1
A_MAX = 4.0            # m/s^2 accel/brake limit
CAR_LENGTH = 4.0       # m, footprint
CAR_WIDTH = 1.8        # m

# Camera model (front bumper, pitched down at the road)
CAMERA_FORWARD = 2.0   # m ahead of the vehicle center
CAMERA_HEIGHT = 1.2    # m
CAMERA_PITCH = 0.35    # rad below horizontal
FOCAL_PX = 32.0
IMG_W, IMG_H = 64, 48
VIEW_RANGE = 80.0      # m, ground beyond this renders as horizon

# Rendered intensities: road out to the corridor edge with a light marking
# band along the inside of each boundary, dark off-road beyond.
ROAD, MARKING, OFFROAD, OBSTACLE_COLOR, SKY = 120, 220, 40, 10, 200
MARK_BAND = 0.3        # m of light edge band inside each corridor boundary

# Droplet speckle geometry (semi-axes in pixels) and brightness
DROPLET_RADIUS = (2.5, 5.5)
DROPLET_BRIGHTNESS = (200.0, 255.0)


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float  # rad, wrapped to (-pi, pi]
    speed: float    # m/s, >= 0


def step(state: VehicleState, steering: float, speed_cmd: float,
         dt: float) -> VehicleState:
    """Kinematic bicycle step: position advances with the current speed,
    then speed moves toward speed_cmd under the acceleration limit."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    delta = min(max(steering, -1.0), 1.0) * DELTA_MAX
    v = state.speed
    x = state.x + v * math.cos(state.heading) * dt
    y = state.y + v * math.sin(state.heading) * dt
    heading = wrap_angle(state.heading + (v / WHEELBASE) * math.tan(delta) * dt)
    dv = min(max(speed_cmd - v, -A_MAX * dt), A_MAX * dt)
    return VehicleState(x, y, heading, max(v + dv, 0.0))


@dataclass(frozen=True)
class Obstacle:
    x: float
    y: float
    heading: float = 0.0
    length: float = 4.0
    width: float = 1.8
    height: float = 1.5

    def rect(self) -> Rect:
        return Rect(self.x, self.y, self.heading, self.length, self.width)


@dataclass(frozen=True)
class Disturbances:
    lateral_jitter_std: float = 0.3   # m, initial offset from the start pose
    steering_noise_std: float = 0.02  # per-step actuation noise


@dataclass(frozen=True)
class WeatherModel:
    brightness_offset: float = 0.0
    contrast_gain: float = 1.0
    noise_sigma: float = 0.0
    droplet_rate: float = 0.0  # expected droplets per frame


WEATHER_PRESETS: dict[str, WeatherModel] = {
    "clear": WeatherModel(),
    "cloudy": WeatherModel(brightness_offset=-25.0, contrast_gain=0.9),
    "wet": WeatherModel(brightness_offset=10.0, contrast_gain=1.1, droplet_rate=4.0),
    "rain": WeatherModel(brightness_offset=-10.0, contrast_gain=0.85,
                         noise_sigma=12.0, droplet_rate=20.0),
}


@dataclass(frozen=True)
class ScenarioConfig:
    """The centerline defines the rendered road and the safe corridor. The
    optional route is what the scripted autopilot tracks (e.g. the swerve
    around an in-lane obstacle); it defaults to the centerline."""

    kind: str
    centerline: Path
    corridor_half_width: float = 1.5
    obstacle: Obstacle | None = None
    route: Path | None = None
    start: tuple[float, float, float] = (0.0, 0.0, 0.0)
    nominal_speed: float = 8.0
    horizon: int = 300
    dt: float = 0.05
    weather: str = "clear"
    disturbances: Disturbances = Disturbances()

    def __post_init__(self):
        if self.corridor_half_width <= 0 or self.dt <= 0 or self.horizon < 1:
            raise ValueError("bad scenario parameters")
        if self.weather not in WEATHER_PRESETS:
            raise ValueError(f"unknown weather {self.weather!r}")

    @property
    def autopilot_route(self) -> Path:
        return self.route if self.route is not None else self.centerline


# Straight-obstacle geometry: a stalled vehicle protrudes into the lane with
# 40 m of clear gap from the start pose's front bumper (zero steering at
# nominal speed first touches it at t = 5.0 s). The autopilot route swerves
# left around it: a tight exit arc (so the swerve command sits a few steering
# bins from straight-ahead), a long stabilizing hold at the offset, and a
# gentle return.
_SWERVE_OFFSET = 1.0
_SWERVE_RADIUS_OUT = 8.0
_SWERVE_RADIUS_BACK = 25.0
_SWERVE_START = 30.0
_OBSTACLE_GAP = 40.0
_ROAD_LENGTH = 130.0


def straight_obstacle_scenario(weather: str = "clear",
                               disturbances: Disturbances = Disturbances(),
                               ) -> ScenarioConfig:
    """Straight road with a stalled vehicle blocking part of the lane; the
    safe corridor follows the straight centerline and the data-collection
    route lane-changes around the obstacle."""
    centerline = PathBuilder(0.0, 0.0, 0.0).line(_ROAD_LENGTH).build()
    a_out = math.acos(1.0 - _SWERVE_OFFSET / (2.0 * _SWERVE_RADIUS_OUT))
    a_back = math.acos(1.0 - _SWERVE_OFFSET / (2.0 * _SWERVE_RADIUS_BACK))
    out_len = 2.0 * _SWERVE_RADIUS_OUT * math.sin(a_out)
    back_len = 2.0 * _SWERVE_RADIUS_BACK * math.sin(a_back)
    face = CAR_LENGTH / 2.0 + _OBSTACLE_GAP
    hold = (face + 4.0 + 4.0) - (_SWERVE_START + out_len)  # past the far side
    route = (PathBuilder(0.0, 0.0, 0.0)
             .line(_SWERVE_START)
             .arc(_SWERVE_RADIUS_OUT, a_out).arc(_SWERVE_RADIUS_OUT, -a_out)
             .line(hold)
             .arc(_SWERVE_RADIUS_BACK, -a_back).arc(_SWERVE_RADIUS_BACK, a_back)
             .line(_ROAD_LENGTH - (_SWERVE_START + out_len + hold + back_len))
             .build())
    obstacle = Obstacle(x=face + 2.0, y=-1.5)
    return ScenarioConfig("straight_obstacle", centerline, obstacle=obstacle,
                          route=route, weather=weather, disturbances=disturbances)


def roundabout_scenario(weather: str = "clear",
                        disturbances: Disturbances = Disturbances(),
                        ) -> ScenarioConfig:
    """Short approach, a quarter of an 18 m roundabout, first exit."""
    path = (PathBuilder(0.0, 0.0, 0.0)
            .line(10.0)
            .arc(18.0, math.pi / 2.0)
            .line(20.0)
            .build())
    return ScenarioConfig("roundabout_first_exit", path, horizon=140,
                          weather=weather, disturbances=disturbances)


def scenario_by_name(kind: str, weather: str = "clear",
                     disturbances: Disturbances = Disturbances()) -> ScenarioConfig:
    if kind == "straight_obstacle":
        return straight_obstacle_scenario(weather, disturbances)
    if kind == "roundabout_first_exit":
        return roundabout_scenario(weather, disturbances)
    raise ValueError(f"unknown scenario {kind!r}")


def _pixel_rays() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel ray directions in the vehicle frame (x forward, y left,
    z up), row-major over the image."""
    u = np.arange(IMG_W) - (IMG_W - 1) / 2.0
    v = np.arange(IMG_H) - (IMG_H - 1) / 2.0
    uu, vv = np.meshgrid(u / FOCAL_PX, v / FOCAL_PX)
    ca, sa = math.cos(CAMERA_PITCH), math.sin(CAMERA_PITCH)
    dx = ca - vv * sa
    dy = -uu
    dz = -sa - vv * ca
    return dx.ravel(), dy.ravel(), dz.ravel()


_RAY_X, _RAY_Y, _RAY_Z = _pixel_rays()


def render(state: VehicleState, scenario: ScenarioConfig) -> np.ndarray:
    """Rasterize the forward view: pinhole ground-plane projection of the
    corridor plus the obstacle as an upright box. Returns (48, 64) uint8."""
    c, s = math.cos(state.heading), math.sin(state.heading)
    cam_x = state.x + CAMERA_FORWARD * c
    cam_y = state.y + CAMERA_FORWARD * s
    dxw = c * _RAY_X - s * _RAY_Y
    dyw = s * _RAY_X + c * _RAY_Y
    dzw = _RAY_Z

    ground = dzw < -1e-12
    t_ground = np.where(ground, -CAMERA_HEIGHT / np.where(ground, dzw, -1.0), np.inf)
    gx = cam_x + t_ground * dxw
    gy = cam_y + t_ground * dyw
    rel_x, rel_y = gx - cam_x, gy - cam_y
    visible = ground & (rel_x * rel_x + rel_y * rel_y <= VIEW_RANGE ** 2)

    img = np.full(IMG_H * IMG_W, SKY, dtype=np.float64)
    if visible.any():
        d2 = scenario.centerline.distance_sq_many(gx[visible], gy[visible])
        hw = scenario.corridor_half_width
        shade = np.where(d2 <= (hw - MARK_BAND) ** 2, ROAD,
                         np.where(d2 <= hw * hw, MARKING, OFFROAD))
        img[visible] = shade

    obs = scenario.obstacle
    if obs is not None:
        co, so = math.cos(obs.heading), math.sin(obs.heading)
        # rays in the obstacle frame (origin at footprint center, z up)
        ox = co * (cam_x - obs.x) + so * (cam_y - obs.y)
        oy = -so * (cam_x - obs.x) + co * (cam_y - obs.y)
        rdx = co * dxw + so * dyw
        rdy = -so * dxw + co * dyw
        tmin = np.zeros_like(dxw)
        tmax = np.full_like(dxw, np.inf)
        for origin, d, half_lo, half_hi in (
                (ox, rdx, -obs.length / 2.0, obs.length / 2.0),
                (oy, rdy, -obs.width / 2.0, obs.width / 2.0),
                (CAMERA_HEIGHT, dzw, 0.0, obs.height)):
            parallel = np.abs(d) < 1e-12
            safe_d = np.where(parallel, 1.0, d)
            t1 = (half_lo - origin) / safe_d
            t2 = (half_hi - origin) / safe_d
            near = np.minimum(t1, t2)
            far = np.maximum(t1, t2)
            inside_slab = (origin >= half_lo) & (origin <= half_hi)
            near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), near)
            far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), far)
            tmin = np.maximum(tmin, near)
            tmax = np.minimum(tmax, far)
        hit = (tmax >= tmin) & (tmin > 1e-9) & (tmin < t_ground)
        img[hit] = OBSTACLE_COLOR

    return img.reshape(IMG_H, IMG_W).astype(np.uint8)


def apply_weather(img: np.ndarray, weather: WeatherModel,
                  rng: np.random.Generator) -> np.ndarray:
    """Contrast/brightness shift, additive Gaussian noise, and bright
    droplet speckles; output clamped to [0, 255]."""
    out = weather.contrast_gain * (img.astype(np.float64) - 128.0) + 128.0
    out += weather.brightness_offset
    if weather.noise_sigma > 0:
        out += rng.normal(0.0, weather.noise_sigma, img.shape)
    if weather.droplet_rate > 0:
        h, w = img.shape
        for _ in range(rng.poisson(weather.droplet_rate)):
            cx = rng.uniform(0, w)
            cy = rng.uniform(0, h)
            ax = rng.uniform(*DROPLET_RADIUS)
            ay = rng.uniform(*DROPLET_RADIUS)
            val = rng.uniform(*DROPLET_BRIGHTNESS)
            x0, x1 = max(int(cx - ax) - 1, 0), min(int(cx + ax) + 2, w)
            y0, y1 = max(int(cy - ay) - 1, 0), min(int(cy + ay) + 2, h)
            if x0 >= x1 or y0 >= y1:
                continue
            xs = np.arange(x0, x1)
            ys = np.arange(y0, y1)[:, None]
            inside = ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0
            patch = out[y0:y1, x0:x1]
            patch[inside] = np.maximum(patch[inside], val)
    return np.clip(np.rint(out), 0.0, 255.0).astype(np.uint8)


def car_rect(state: VehicleState) -> Rect:
    return Rect(state.x, state.y, state.heading, CAR_LENGTH, CAR_WIDTH)


def hits_obstacle(state: VehicleState, scenario: ScenarioConfig) -> bool:
    if scenario.obstacle is None:
        return False
    return rects_overlap(car_rect(state), scenario.obstacle.rect())


def is_safe(state: VehicleState, scenario: ScenarioConfig) -> bool:
    """Inside the lateral corridor and clear of the obstacle."""
    dist, _, _ = scenario.centerline.project(state.x, state.y)
    if dist > scenario.corridor_half_width:
        return False
    return not hits_obstacle(state, scenario)


def autopilot_steering(state: VehicleState, scenario: ScenarioConfig,
                       lookahead: float = 6.0) -> float:
    """Pure pursuit on the ground-truth autopilot route; clamped to [-1, 1]."""
    route = scenario.autopilot_route
    _, s_here, _ = route.project(state.x, state.y)
    tx, ty = route.point_at(s_here + lookahead)
    dx, dy = tx - state.x, ty - state.y
    c, h = math.cos(state.heading), math.sin(state.heading)
    fwd = c * dx + h * dy
    left = -h * dx + c * dy
    ld = max(math.hypot(fwd, left), 1e-9)
    alpha = math.atan2(left, fwd)
    delta = math.atan2(2.0 * WHEELBASE * math.sin(alpha), ld)
    return min(max(delta / DELTA_MAX, -1.0), 1.0)


@dataclass(frozen=True)
class AutopilotController:
    """Scripted data-collection driver; reads the true state, not the camera."""

    lookahead: float = 6.0

    def act(self, obs, state, scenario, rng):
        return autopilot_steering(state, scenario, self.lookahead), None


@dataclass(frozen=True)
class MonitorPolicy:
    """Maps warnings to actions: W0/W1 slow to slow_factor of nominal,
    W2 latches a braking stop and hands control over. With latch_slowdown
    the reduced speed persists once the operator has been alerted; with
    escalation_gate a severe warning only triggers the handover brake when
    the operator is already alerted (an isolated severe report raises the
    alert and slows instead), so one noisy confidence estimate cannot stop
    the car."""

    slow_factor: float = 0.5
    latch_slowdown: bool = True
    escalation_gate: bool = True

    def __post_init__(self):
        if not 0.0 <= self.slow_factor <= 1.0:
            raise ValueError("slow_factor must be in [0, 1]")


@dataclass(frozen=True)
class StepRecord:
    step: int
    state: VehicleState
    steering: float
    speed_cmd: float
    report: ConfidenceReport | None
    warning: str | None


OUTCOMES = ("completed", "collided", "out_of_bounds", "handover", "error")


@dataclass(frozen=True)
class EpisodePath:
    records: tuple[StepRecord, ...]
    outcome: str
    seed: object
    observations: tuple[np.ndarray, ...] | None = None

    @property
    def safe(self) -> bool:
        """Safe for the whole run: no violation occurred (a handover stop
        before any violation counts as safe)."""
        return self.outcome in ("completed", "handover")


def run_episode(scenario: ScenarioConfig, controller, monitor: MonitorPolicy | None = None,
                seed=0, keep_observations: bool = False) -> EpisodePath:
    """Drive one monitored or unmonitored episode. Deterministic given
    (scenario, controller, seed): disturbances, weather and controller
    sampling each own a child stream of the seed."""
    ss = np.random.SeedSequence(seed)
    rng_init, rng_weather, rng_ctrl, rng_noise = map(np.random.default_rng, ss.spawn(4))
    weather = WEATHER_PRESETS[scenario.weather]

    x0, y0, h0 = scenario.start
    jitter = rng_init.normal(0.0, scenario.disturbances.lateral_jitter_std)
    state = VehicleState(x0 - jitter * math.sin(h0), y0 + jitter * math.cos(h0),
                         h0, scenario.nominal_speed)

    records: list[StepRecord] = []
    frames: list[np.ndarray] = []
    outcome = "completed"
    braking = False
    alerted = False
    for k in range(scenario.horizon + 1):
        obs = apply_weather(render(state, scenario), weather, rng_weather)
        if keep_observations:
            frames.append(obs)
        try:
            steering, report = controller.act(obs, state, scenario, rng_ctrl)
        except Exception:
            records.append(StepRecord(k, state, 0.0, 0.0, None, None))
            outcome = "error"
            break
        warning = report.warning if report is not None else None
        if monitor is not None:
            if report is None:
                raise ValueError("monitored episodes need a confidence-reporting controller")
            if warning == "W2" and (alerted or not monitor.escalation_gate):
                braking = True
            if braking:
                speed_cmd = 0.0
            elif warning is not None or (alerted and monitor.latch_slowdown):
                speed_cmd = monitor.slow_factor * scenario.nominal_speed
            else:
                speed_cmd = scenario.nominal_speed
            alerted = alerted or warning is not None
        else:
            speed_cmd = scenario.nominal_speed
        records.append(StepRecord(k, state, steering, speed_cmd, report, warning))
        # the controller keeps steering while the braking stop completes
        applied = steering + rng_noise.normal(0.0, scenario.disturbances.steering_noise_std)
        applied = min(max(applied, -1.0), 1.0)
        state = step(state, applied, speed_cmd, scenario.dt)
        if not is_safe(state, scenario):
            outcome = "collided" if hits_obstacle(state, scenario) else "out_of_bounds"
            break
        if braking and state.speed <= 1e-12:
            outcome = "handover"
            break
        if scenario.centerline.project(state.x, state.y)[1] >= scenario.centerline.length - 1.0:
            break
    return EpisodePath(tuple(records), outcome, seed,
                       tuple(frames) if keep_observations else None)


def collect_dataset(scenario: ScenarioConfig, episodes: int, seed: int = 0,
                    frame_stride: int = 1) -> ImageDataset:
    """Autopilot episodes in clear weather with jittered starts; labels are
    the binned autopilot commands. Unsafe generating episodes are a bug and
    abort collection."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    scenario = replace(scenario, weather="clear")
    pilot = AutopilotController()
    images: list[np.ndarray] = []
    labels: list[int] = []
    steerings: list[float] = []
    for ep in range(episodes):
        path = run_episode(scenario, pilot, None, seed=[seed, ep], keep_observations=True)
        if not path.safe:
            raise RuntimeError(f"autopilot episode {ep} was unsafe ({path.outcome})")
        for rec, frame in list(zip(path.records, path.observations))[::frame_stride]:
            images.append(frame)
            labels.append(steering_to_class(rec.steering))
            steerings.append(rec.steering)
    return ImageDataset(np.stack(images), np.asarray(labels, dtype=np.int64),
                        scenario.kind, seed, np.asarray(steerings))
