use serde::{Deserialize, Serialize};

use super::{Color, ObjectClass, ObjectInstance};
use crate::error::{Error, Result};

/// Spatial relation of the pose with respect to an object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    North,
    South,
    East,
    West,
    OnTopOf,
    Near,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::North,
        Relation::South,
        Relation::East,
        Relation::West,
        Relation::OnTopOf,
        Relation::Near,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::North => "north of",
            Relation::South => "south of",
            Relation::East => "east of",
            Relation::West => "west of",
            Relation::OnTopOf => "on top of",
            Relation::Near => "near",
        }
    }
}

/// Thresholds of the relation rules, in meters.
///
/// 1. 2D distance below `on_top_radius`: on top of.
/// 2. One axis exceeds the other by more than `dead_zone`: the cardinal
///    direction of the dominant axis.
/// 3. 2D distance below `near_radius`: near.
/// 4. Otherwise the cardinal direction of the larger axis, ties to north/south.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationRules {
    pub on_top_radius: f64,
    pub dead_zone: f64,
    pub near_radius: f64,
}

impl Default for RelationRules {
    fn default() -> Self {
        Self {
            on_top_radius: 1.0,
            dead_zone: 1.0,
            near_radius: 5.0,
        }
    }
}

impl RelationRules {
    pub fn validate(&self) -> Result<()> {
        let ok = self.on_top_radius > 0.0
            && self.dead_zone >= 0.0
            && self.near_radius >= self.on_top_radius
            && [self.on_top_radius, self.dead_zone, self.near_radius].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config("relation thresholds must satisfy 0 < on_top ≤ near, dead_zone ≥ 0".into()))
        }
    }
}

fn cardinal(dx: f64, dy: f64) -> Relation {
    if dy.abs() >= dx.abs() {
        if dy > 0.0 {
            Relation::North
        } else {
            Relation::South
        }
    } else if dx > 0.0 {
        Relation::East
    } else {
        Relation::West
    }
}

/// Relation of `pose` to `instance`, read as "the pose is <relation> the
/// instance". Only the ground-plane coordinates are used.
pub fn relation_truth(pose: [f64; 2], instance: &ObjectInstance, rules: &RelationRules) -> Relation {
    let dx = pose[0] - instance.centroid[0];
    let dy = pose[1] - instance.centroid[1];
    let dist = dx.hypot(dy);
    if dist < rules.on_top_radius {
        Relation::OnTopOf
    } else if (dx.abs() - dy.abs()).abs() > rules.dead_zone {
        cardinal(dx, dy)
    } else if dist < rules.near_radius {
        Relation::Near
    } else {
        cardinal(dx, dy)
    }
}

/// One description sentence, e.g. "The pose is south of a gray building".
pub fn describe(pose: [f64; 2], instance: &ObjectInstance, rules: &RelationRules) -> String {
    let rel = relation_truth(pose, instance, rules);
    format!(
        "The pose is {} a {} {}",
        rel.phrase(),
        instance.color.phrase(),
        instance.class.phrase()
    )
}

/// Inverse of [`describe`].
pub fn parse_description(sentence: &str) -> Option<(Relation, Color, ObjectClass)> {
    let rest = sentence.strip_prefix("The pose is ")?;
    let rel = Relation::ALL.into_iter().find(|r| rest.starts_with(r.phrase()))?;
    let rest = rest[rel.phrase().len()..].strip_prefix(" a ")?;
    let color = Color::ALL.into_iter().find(|c| rest.starts_with(c.phrase()))?;
    let rest = rest[color.phrase().len()..].strip_prefix(' ')?;
    let class = ObjectClass::ALL.into_iter().find(|c| rest == c.phrase())?;
    Some((rel, color, class))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64, y: f64, class: ObjectClass, color: Color) -> ObjectInstance {
        ObjectInstance {
            id: 0,
            class,
            color,
            centroid: [x, y, 0.0],
        }
    }

    fn rel(pose: [f64; 2], x: f64, y: f64) -> Relation {
        relation_truth(pose, &at(x, y, ObjectClass::Pole, Color::Red), &RelationRules::default())
    }

    #[test]
    fn axis_rules() {
        assert_eq!(rel([0.0, 0.0], 0.0, 5.0), Relation::South);
        assert_eq!(rel([2.0, 2.0], 2.0, 2.0), Relation::OnTopOf);
        assert_eq!(rel([3.0, 4.0], 0.0, 0.0), Relation::North);
        assert_eq!(rel([-9.0, 1.0], 0.0, 0.0), Relation::West);
        assert_eq!(rel([2.0, 2.5], 0.0, 0.0), Relation::Near);
    }

    #[test]
    fn south_of_a_gray_building() {
        let b = at(10.0, 0.0, ObjectClass::Building, Color::Gray);
        assert_eq!(
            describe([10.0, -8.0], &b, &RelationRules::default()),
            "The pose is south of a gray building"
        );
    }

    #[test]
    fn on_top_of_a_dark_green_wall() {
        let w = at(4.0, -3.0, ObjectClass::Wall, Color::DarkGreen);
        let s = describe([4.0, -3.0], &w, &RelationRules::default());
        assert_eq!(s, "The pose is on top of a dark green wall");
        assert_eq!(
            parse_description(&s),
            Some((Relation::OnTopOf, Color::DarkGreen, ObjectClass::Wall))
        );
    }

    #[test]
    fn parse_rejects_garbage() {
        assert_eq!(parse_description("The pose is behind a red pole"), None);
        assert_eq!(parse_description("The pose is near a red"), None);
    }
}
