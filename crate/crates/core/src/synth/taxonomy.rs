use crate::error::{Error, Result};
use crate::tensor::IGNORE;

/// Reporting group of a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Static,
    DynamicSmall,
}

/// Finer split of the dynamic-and-small group, used to pick mixup classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Static,
    /// Thin or small structures (poles, lights, signs).
    Small,
    /// Things that move (people, vehicles).
    Dynamic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassInfo {
    pub id: u8,
    pub name: &'static str,
    pub kind: Kind,
    pub long_tailed: bool,
    pub palette: [u8; 3],
    /// Mean daytime surface colour used by the renderer.
    pub day_color: [f32; 3],
}

impl ClassInfo {
    pub fn group(&self) -> Group {
        match self.kind {
            Kind::Static => Group::Static,
            Kind::Small | Kind::Dynamic => Group::DynamicSmall,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    classes: Vec<ClassInfo>,
}

pub const ROAD: u8 = 0;
pub const SKY: u8 = 1;
pub const BUILDING: u8 = 2;
pub const VEGETATION: u8 = 3;
pub const POLE: u8 = 4;
pub const TRAFFIC_LIGHT: u8 = 5;
pub const SIGN: u8 = 6;
pub const PERSON: u8 = 7;
pub const CAR: u8 = 8;
pub const BUS: u8 = 9;

impl Taxonomy {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        if classes.is_empty() || classes.len() >= IGNORE as usize {
            return Err(Error::invalid(
                "taxonomy",
                format!("{} classes", classes.len()),
            ));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::invalid(
                    "taxonomy",
                    format!(
                        "class ids must be 0..C-1 in order; position {i} has id {}",
                        c.id
                    ),
                ));
            }
            if c.long_tailed && c.group() != Group::DynamicSmall {
                return Err(Error::invalid(
                    "taxonomy",
                    format!("long-tailed class {} must be dynamic/small", c.name),
                ));
            }
        }
        Ok(Taxonomy { classes })
    }

    /// The ten-class street taxonomy: four static classes, six dynamic or
    /// small ones, with bus as the only long-tailed class.
    pub fn street() -> Self {
        let c = |id, name, kind, long_tailed, palette, day_color| ClassInfo {
            id,
            name,
            kind,
            long_tailed,
            palette,
            day_color,
        };
        Taxonomy::new(vec![
            c(
                ROAD,
                "road",
                Kind::Static,
                false,
                [128, 64, 128],
                [0.46, 0.45, 0.48],
            ),
            c(
                SKY,
                "sky",
                Kind::Static,
                false,
                [70, 130, 180],
                [0.55, 0.74, 0.95],
            ),
            c(
                BUILDING,
                "building",
                Kind::Static,
                false,
                [70, 70, 70],
                [0.62, 0.44, 0.34],
            ),
            c(
                VEGETATION,
                "vegetation",
                Kind::Static,
                false,
                [107, 142, 35],
                [0.24, 0.55, 0.20],
            ),
            c(
                POLE,
                "pole",
                Kind::Small,
                false,
                [153, 153, 153],
                [0.80, 0.80, 0.76],
            ),
            c(
                TRAFFIC_LIGHT,
                "traffic-light",
                Kind::Small,
                false,
                [250, 170, 30],
                [0.95, 0.80, 0.10],
            ),
            c(
                SIGN,
                "sign",
                Kind::Small,
                false,
                [220, 220, 0],
                [0.90, 0.12, 0.15],
            ),
            c(
                PERSON,
                "person",
                Kind::Dynamic,
                false,
                [220, 20, 60],
                [0.85, 0.45, 0.70],
            ),
            c(
                CAR,
                "car",
                Kind::Dynamic,
                false,
                [0, 0, 142],
                [0.12, 0.22, 0.75],
            ),
            c(
                BUS,
                "bus",
                Kind::Dynamic,
                true,
                [0, 60, 100],
                [0.95, 0.55, 0.08],
            ),
        ])
        .expect("street taxonomy is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn class(&self, id: u8) -> &ClassInfo {
        &self.classes[id as usize]
    }

    pub fn is_valid_label(&self, v: u8) -> bool {
        v == IGNORE || (v as usize) < self.classes.len()
    }

    pub fn ids_where(&self, f: impl Fn(&ClassInfo) -> bool) -> Vec<u8> {
        self.classes.iter().filter(|c| f(c)).map(|c| c.id).collect()
    }

    pub fn static_ids(&self) -> Vec<u8> {
        self.ids_where(|c| c.group() == Group::Static)
    }

    pub fn dynamic_small_ids(&self) -> Vec<u8> {
        self.ids_where(|c| c.group() == Group::DynamicSmall)
    }

    pub fn long_tailed_ids(&self) -> Vec<u8> {
        self.ids_where(|c| c.long_tailed)
    }

    pub fn is_static(&self, id: u8) -> bool {
        (id as usize) < self.classes.len() && self.class(id).group() == Group::Static
    }

    /// Palette index of an RGB colour, if it is one of the class colours.
    pub fn palette_lookup(&self, rgb: [u8; 3]) -> Option<u8> {
        self.classes.iter().find(|c| c.palette == rgb).map(|c| c.id)
    }
}
