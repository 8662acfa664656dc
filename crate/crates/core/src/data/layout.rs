use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which part of the per-frame feature vector a slice holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceKind {
    RootAngularVelocity,
    RootLinearVelocity,
    RootHeight,
    JointPositions,
    JointRotations,
    JointVelocities,
    FootContacts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSlice {
    pub kind: SliceKind,
    pub start: usize,
    pub len: usize,
}

impl FeatureSlice {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Named contiguous slices over the per-frame feature vector.
///
/// Joint positions and rotations exclude the root (`J - 1` joints), joint
/// velocities include it (`J` joints). Foot joints are indexed in skeleton
/// numbering, so they are always `>= 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub id: u32,
    pub name: String,
    pub joints: usize,
    pub foot_joints: Option<[usize; 4]>,
    pub slices: Vec<FeatureSlice>,
}

pub const HUMANML_LAYOUT_ID: u32 = 0;
pub const DESK_LAYOUT_ID: u32 = 1;

impl FeatureLayout {
    /// Builds the standard slice table for a `joints`-joint skeleton.
    pub fn for_skeleton(id: u32, name: &str, joints: usize, foot_joints: Option<[usize; 4]>) -> Result<Self> {
        if joints < 2 {
            return Err(Error::InvalidLayout(format!("need at least 2 joints, got {joints}")));
        }
        let table = [
            (SliceKind::RootAngularVelocity, 1),
            (SliceKind::RootLinearVelocity, 2),
            (SliceKind::RootHeight, 1),
            (SliceKind::JointPositions, (joints - 1) * 3),
            (SliceKind::JointRotations, (joints - 1) * 6),
            (SliceKind::JointVelocities, joints * 3),
            (SliceKind::FootContacts, 4),
        ];
        let mut start = 0;
        let slices = table
            .iter()
            .map(|&(kind, len)| {
                let s = FeatureSlice { kind, start, len };
                start += len;
                s
            })
            .collect();
        let layout = Self { id, name: name.to_string(), joints, foot_joints, slices };
        layout.validate()?;
        Ok(layout)
    }

    /// 22-joint, 263-dim layout.
    pub fn humanml() -> Self {
        Self::for_skeleton(HUMANML_LAYOUT_ID, "humanml-263", 22, Some([7, 10, 8, 11])).expect("valid")
    }

    /// 5-joint, 59-dim layout: root plus left ankle/toe and right ankle/toe.
    pub fn desk() -> Self {
        Self::for_skeleton(DESK_LAYOUT_ID, "desk-59", 5, Some([1, 2, 3, 4])).expect("valid")
    }

    pub fn by_id(id: u32) -> Result<Self> {
        match id {
            HUMANML_LAYOUT_ID => Ok(Self::humanml()),
            DESK_LAYOUT_ID => Ok(Self::desk()),
            other => Err(Error::UnknownLayout(other)),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "humanml" | "humanml-263" => Ok(Self::humanml()),
            "desk" | "desk-59" => Ok(Self::desk()),
            other => Err(Error::InvalidConfig(format!("unknown layout {other:?}"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.slices.iter().map(|s| s.len).sum()
    }

    pub fn slice(&self, kind: SliceKind) -> Range<usize> {
        self.slices
            .iter()
            .find(|s| s.kind == kind)
            .map(FeatureSlice::range)
            .expect("every kind present in a validated layout")
    }

    /// Channels of the root-relative position of skeleton joint `joint` (>= 1).
    pub fn joint_position(&self, joint: usize) -> Range<usize> {
        debug_assert!(joint >= 1 && joint < self.joints);
        let base = self.slice(SliceKind::JointPositions).start + (joint - 1) * 3;
        base..base + 3
    }

    pub fn joint_rotation(&self, joint: usize) -> Range<usize> {
        let base = self.slice(SliceKind::JointRotations).start + (joint - 1) * 6;
        base..base + 6
    }

    pub fn joint_velocity(&self, joint: usize) -> Range<usize> {
        let base = self.slice(SliceKind::JointVelocities).start + joint * 3;
        base..base + 3
    }

    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for s in &self.slices {
            if s.start != expected {
                return Err(Error::InvalidLayout(format!(
                    "slice {:?} starts at {} instead of {}",
                    s.kind, s.start, expected
                )));
            }
            expected += s.len;
        }
        let kinds = [
            SliceKind::RootAngularVelocity,
            SliceKind::RootLinearVelocity,
            SliceKind::RootHeight,
            SliceKind::JointPositions,
            SliceKind::JointRotations,
            SliceKind::JointVelocities,
            SliceKind::FootContacts,
        ];
        for k in kinds {
            if self.slices.iter().filter(|s| s.kind == k).count() != 1 {
                return Err(Error::InvalidLayout(format!("slice {k:?} must appear exactly once")));
            }
        }
        let last = self.slices.last().expect("non-empty");
        if last.kind != SliceKind::FootContacts || last.len != 4 {
            return Err(Error::InvalidLayout("foot contacts must be the final 4 dims".into()));
        }
        if let Some(feet) = self.foot_joints {
            if feet.iter().any(|&j| j == 0 || j >= self.joints) {
                return Err(Error::InvalidLayout(format!("foot joints {feet:?} out of range")));
            }
        }
        Ok(())
    }
}
