//! `LSFD` dataset container.
//!
//! Layout (little-endian): magic `LSFD`, `u32` version, header
//! (`u16 H, u16 W, f32 dt, 3 x f32 action table, u64 seed, u32 count`), then
//! per trajectory `u32 length, u8 terminated_reason` followed by per step
//! `H*W f32 image, f32 heading, u8 action, u8 failure label, 3 x f32 state`.

use std::fs;
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{DecodeError, Error, Result};
use crate::types::{
    ActionIndex, Dataset, DatasetHeader, Observation, State, Step, TerminatedReason, Trajectory,
};

pub const DATASET_MAGIC: [u8; 4] = *b"LSFD";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let px = d.header.height as usize * d.header.width as usize;
    let mut w = Writer::with_capacity(32 + d.total_steps() * (px * 4 + 19));
    w.bytes(&DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u16(d.header.height);
    w.u16(d.header.width);
    w.f32(d.header.dt);
    for a in d.header.action_table {
        w.f32(a);
    }
    w.u64(d.header.seed);
    w.u32(d.trajectories.len() as u32);
    for t in &d.trajectories {
        w.u32(t.steps.len() as u32);
        w.u8(t.terminated.to_u8());
        for s in &t.steps {
            w.f32_slice(&s.observation.image);
            w.f32(s.observation.heading);
            w.u8(s.action.into());
            w.u8(s.failure_label as u8);
            w.f32(s.state.px as f32);
            w.f32(s.state.py as f32);
            w.f32(s.state.theta as f32);
        }
    }
    w.buf
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DecodeError> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let height = r.u16("header")?;
    let width = r.u16("header")?;
    let dt = r.f32("header")?;
    let action_table = [r.f32("header")?, r.f32("header")?, r.f32("header")?];
    let seed = r.u64("header")?;
    let count = r.u32("header")? as usize;
    let header = DatasetHeader {
        height,
        width,
        dt,
        action_table,
        seed,
    };
    let px = height as usize * width as usize;
    let mut trajectories = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("trajectory header")? as usize;
        let reason = r.u8("trajectory header")?;
        let terminated = TerminatedReason::from_u8(reason)
            .ok_or_else(|| DecodeError::Invalid(format!("terminated_reason {reason}")))?;
        let mut steps = Vec::with_capacity(len.min(1 << 16));
        for _ in 0..len {
            let image = r.f32_vec(px, "step image")?;
            let heading = r.f32("step")?;
            let action_raw = r.u8("step")?;
            let action = ActionIndex::try_from(action_raw)
                .map_err(|_| DecodeError::Invalid(format!("action index {action_raw}")))?;
            let failure_label = match r.u8("step")? {
                0 => false,
                1 => true,
                v => return Err(DecodeError::Invalid(format!("failure label {v}"))),
            };
            let state = State {
                px: r.f32("step state")? as f64,
                py: r.f32("step state")? as f64,
                theta: r.f32("step state")? as f64,
            };
            steps.push(Step {
                observation: Observation {
                    height,
                    width,
                    image,
                    heading,
                },
                action,
                failure_label,
                state,
            });
        }
        trajectories.push(Trajectory { steps, terminated });
    }
    r.finish("dataset")?;
    Ok(Dataset { header, trajectories })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    d.validate()?;
    fs::write(path, encode_dataset(d))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    decode_dataset(&bytes).map_err(|e| Error::decode(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(h: u16, w: u16) -> DatasetHeader {
        DatasetHeader {
            height: h,
            width: w,
            dt: 0.05,
            action_table: [-1.25, 0.0, 1.25],
            seed: 7,
        }
    }

    fn one_step(h: u16, w: u16) -> Step {
        Step {
            observation: Observation {
                height: h,
                width: w,
                image: (0..h as usize * w as usize).map(|i| (i % 3) as f32 * 0.5).collect(),
                heading: 0.25,
            },
            action: ActionIndex::LEFT,
            failure_label: true,
            state: State {
                px: 0.125,
                py: -0.5,
                theta: 0.25,
            },
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let d = Dataset {
            header: header(8, 8),
            trajectories: vec![],
        };
        assert_eq!(decode_dataset(&encode_dataset(&d)).unwrap(), d);
    }

    #[test]
    fn single_step_round_trips_via_file() {
        let d = Dataset {
            header: header(4, 6),
            trajectories: vec![Trajectory {
                steps: vec![one_step(4, 6)],
                terminated: TerminatedReason::OutOfBounds,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.lsfd");
        save_dataset(&d, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), d);
    }

    #[test]
    fn distinct_decode_errors() {
        let d = Dataset {
            header: header(2, 2),
            trajectories: vec![Trajectory {
                steps: vec![one_step(2, 2)],
                terminated: TerminatedReason::Horizon,
            }],
        };
        let good = encode_dataset(&d);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_dataset(&bad_magic), Err(DecodeError::BadMagic { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            decode_dataset(&bad_version),
            Err(DecodeError::Version { expected: 1, found: 2 })
        ));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(decode_dataset(truncated), Err(DecodeError::Truncated { .. })));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_dataset(&trailing), Err(DecodeError::TrailingBytes { .. })));
    }

    fn arb_step(h: u16, w: u16) -> impl Strategy<Value = Step> {
        (
            prop::collection::vec(0.0f32..=1.0, h as usize * w as usize),
            -3.14f32..3.14,
            0usize..3,
            any::<bool>(),
            (-1.0f32..1.0, -1.0f32..1.0, -3.14f32..3.14),
        )
            .prop_map(move |(image, heading, a, label, (x, y, th))| Step {
                observation: Observation {
                    height: h,
                    width: w,
                    image,
                    heading,
                },
                action: ActionIndex::new(a).unwrap(),
                failure_label: label,
                state: State {
                    px: x as f64,
                    py: y as f64,
                    theta: th as f64,
                },
            })
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        (1u16..5, 1u16..5, any::<u64>()).prop_flat_map(|(h, w, seed)| {
            prop::collection::vec(
                (prop::collection::vec(arb_step(h, w), 0..4), any::<bool>()),
                0..4,
            )
            .prop_map(move |trajs| Dataset {
                header: DatasetHeader {
                    height: h,
                    width: w,
                    dt: 0.05,
                    action_table: [-1.25, 0.0, 1.25],
                    seed,
                },
                trajectories: trajs
                    .into_iter()
                    .map(|(steps, oob)| Trajectory {
                        steps,
                        terminated: if oob {
                            TerminatedReason::OutOfBounds
                        } else {
                            TerminatedReason::Horizon
                        },
                    })
                    .collect(),
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(d in arb_dataset()) {
            let bytes = encode_dataset(&d);
            let back = decode_dataset(&bytes).unwrap();
            prop_assert_eq!(&back, &d);
            prop_assert_eq!(encode_dataset(&back), bytes);
        }
    }
}
