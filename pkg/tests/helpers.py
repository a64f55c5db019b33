"""Small scenario builders shared by the tests."""

from atcmarl.geo import GeoPoint, haversine_km, interpolate
from atcmarl.scenario import FlightPlan, NavPoint, Scenario


def straight_plan(fid, start, end, speed=230.0, dep=0.0, n_points=2):
    """Constant-speed plan along the great circle from start to end."""
    locs = [interpolate(start, end, k / (n_points - 1)) for k in range(n_points)]
    pts, t = [], dep
    for k, loc in enumerate(locs):
        pts.append(NavPoint(loc, t, speed))
        if k + 1 < len(locs):
            t += haversine_km(loc, locs[k + 1]) * 1000.0 / speed
    return FlightPlan(fid, tuple(pts))


def offset(p, km_north=0.0, km_east=0.0):
    """Point displaced by small distances (flat-earth approximation is fine for placement)."""
    import math
    dlat = km_north / 111.19492664455873
    dlon = km_east / (111.19492664455873 * math.cos(math.radians(p.lat)))
    return GeoPoint(p.lat + dlat, p.lon + dlon, p.alt)


def scenario_of(plans, horizon=100, step=240):
    return Scenario(list(plans), horizon_steps=horizon, step_seconds=step)
