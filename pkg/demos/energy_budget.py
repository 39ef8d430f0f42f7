"""Energy budget of the trap: cycle totals, battery life and solar recharge.

Run with ``python3 demos/energy_budget.py [out.csv]``.
"""
import sys

from mothtrap.energy import (
    RECHARGE_TABLE, Battery, consistency_check, cycle_energy, daylight_schedule, harvest_power, lifetime_cycles,
    load_energy_config, recharge_time, simulate_soc,
)

# %% Per-cycle energy for every shipped hardware/model profile
cfg = load_energy_config()
for p in sorted(cfg.profiles.values(), key=cycle_energy):
    print(f"{p.name:<22} {cycle_energy(p):7.1f} J  (published {p.published_total})")

# %% How long does a full battery last without any sun?
battery = cfg.battery
print(f"\nbattery: {battery.full_energy:.0f} J")
for name in ("rpi3-lenet", "rpi4-mobilenetv2"):
    life = lifetime_cycles(battery, cfg.profile(name))
    print(f"{name}: {life.cycles} cycles = {life.days:g} days at two cycles per day")

# %% Solar harvesting at the three characterised light levels
lenet = cfg.profile("rpi3-lenet")
for lux in RECHARGE_TABLE:
    p = harvest_power(cfg.panel, lux)
    full = recharge_time(battery.recharge_energy(), cfg.panel, lux) / 3600
    one = recharge_time(cycle_energy(lenet), cfg.panel, lux) / 60
    print(f"{lux:>6} lx  {1000 * p:6.1f} mW  20-100% in {full:5.1f} h, one cycle in {one:4.1f} min")

for row in consistency_check(cfg.panel, battery, lenet):
    print(row)

# %% Three days at 7000 lx, starting half full
trace = simulate_soc(Battery(state_of_charge=0.5), lenet, cfg.panel, daylight_schedule(7000), days=3)
print(f"\nSoC {trace.soc[0]:.3f} -> {trace.soc[-1]:.3f}, min {trace.soc.min():.3f}")
if len(sys.argv) > 1:
    trace.write_csv(sys.argv[1])
    print("wrote", sys.argv[1])
