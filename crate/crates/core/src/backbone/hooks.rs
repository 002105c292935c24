use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HookPoint {
    Down1,
    Down2,
    Down3,
    Up1,
    Up2,
    Up3,
}

impl HookPoint {
    pub const ALL: [HookPoint; 6] = [
        HookPoint::Down1,
        HookPoint::Down2,
        HookPoint::Down3,
        HookPoint::Up1,
        HookPoint::Up2,
        HookPoint::Up3,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn down_index(self) -> Option<usize> {
        match self {
            HookPoint::Down1 => Some(0),
            HookPoint::Down2 => Some(1),
            HookPoint::Down3 => Some(2),
            _ => None,
        }
    }
}

/// Called with each hooked block output; the returned map replaces it downstream.
pub trait BlockHooks {
    fn on_block(&mut self, point: HookPoint, map: FeatureMap) -> Result<FeatureMap>;
}

pub struct NoHooks;

impl BlockHooks for NoHooks {
    fn on_block(&mut self, _point: HookPoint, map: FeatureMap) -> Result<FeatureMap> {
        Ok(map)
    }
}

/// Channel-mapped patch maps at patch-grid resolution, one per down block.
#[derive(Debug, Clone)]
pub struct LocalInjection {
    pub maps: [FeatureMap; 3],
}

/// Records every hooked map, adding resized local injections to down blocks first.
#[derive(Default)]
pub struct CaptureHooks<'a> {
    local: Option<&'a LocalInjection>,
    pub captured: Vec<(HookPoint, FeatureMap)>,
}

impl<'a> CaptureHooks<'a> {
    pub fn new(local: Option<&'a LocalInjection>) -> Self {
        Self {
            local,
            captured: Vec::with_capacity(6),
        }
    }
}

pub fn inject_local(map: &FeatureMap, patch_map: &FeatureMap) -> Result<FeatureMap> {
    if patch_map.channels() != map.channels() || patch_map.batch() != map.batch() {
        return Err(Error::ShapeMismatch(format!(
            "local injection {:?} for block {:?}",
            patch_map.data.dims(),
            map.data.dims()
        )));
    }
    let resized = resize_bilinear(patch_map, map.h, map.w)?;
    map.map((&map.data + &resized.data)?)
}

impl BlockHooks for CaptureHooks<'_> {
    fn on_block(&mut self, point: HookPoint, map: FeatureMap) -> Result<FeatureMap> {
        let map = match (point.down_index(), self.local) {
            (Some(n), Some(local)) => inject_local(&map, &local.maps[n])?,
            _ => map,
        };
        self.captured.push((point, map.clone()));
        Ok(map)
    }
}
