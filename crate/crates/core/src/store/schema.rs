use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnType {
    Int,
    OptInt,
    Text,
}

#[derive(Debug, Clone, Copy)]
pub struct Column {
    pub name: &'static str,
    pub ty: ColumnType,
}

const fn int(name: &'static str) -> Column {
    Column {
        name,
        ty: ColumnType::Int,
    }
}

const fn opt(name: &'static str) -> Column {
    Column {
        name,
        ty: ColumnType::OptInt,
    }
}

const fn text(name: &'static str) -> Column {
    Column {
        name,
        ty: ColumnType::Text,
    }
}

/// `columns` of the owning table must match the key of `target`.
#[derive(Debug, Clone, Copy)]
pub struct ForeignKey {
    pub columns: &'static [usize],
    pub target: Table,
}

/// The business tables. Declaration order is a valid import order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Table {
    Customer,
    Item,
    Order,
    OrderLine,
    ProductionOrder,
    Workplace,
    ProductionOrderLine,
}

impl Table {
    pub const ALL: [Table; 7] = [
        Table::Customer,
        Table::Item,
        Table::Order,
        Table::OrderLine,
        Table::ProductionOrder,
        Table::Workplace,
        Table::ProductionOrderLine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Table::Customer => "CUSTOMER",
            Table::Item => "ITEM",
            Table::Order => "ORDER",
            Table::OrderLine => "ORDER_LINE",
            Table::ProductionOrder => "PRODUCTION_ORDER",
            Table::Workplace => "WORKPLACE",
            Table::ProductionOrderLine => "PRODUCTION_ORDER_LINE",
        }
    }

    pub fn columns(self) -> &'static [Column] {
        const CUSTOMER: &[Column] = &[int("c_id"), text("c_name")];
        const ITEM: &[Column] = &[int("i_id"), text("i_name")];
        const ORDER: &[Column] = &[int("o_id"), int("o_c_id"), int("o_entry_ts")];
        const ORDER_LINE: &[Column] = &[
            int("ol_o_id"),
            int("ol_number"),
            int("ol_i_id"),
            int("ol_quantity"),
        ];
        const PRODUCTION_ORDER: &[Column] =
            &[int("po_o_id"), int("po_ol_number"), int("po_quantity")];
        const WORKPLACE: &[Column] = &[
            int("wp_id"),
            text("wp_name"),
            int("wp_downtime_start"),
            int("wp_downtime_end"),
        ];
        const PRODUCTION_ORDER_LINE: &[Column] = &[
            int("pol_o_id"),
            int("pol_ol_number"),
            int("pol_number"),
            int("pol_workplace_id"),
            opt("pol_start_ts"),
            opt("pol_end_ts"),
        ];
        match self {
            Table::Customer => CUSTOMER,
            Table::Item => ITEM,
            Table::Order => ORDER,
            Table::OrderLine => ORDER_LINE,
            Table::ProductionOrder => PRODUCTION_ORDER,
            Table::Workplace => WORKPLACE,
            Table::ProductionOrderLine => PRODUCTION_ORDER_LINE,
        }
    }

    /// Number of leading columns forming the primary key.
    pub fn key_len(self) -> usize {
        match self {
            Table::Customer | Table::Item | Table::Order | Table::Workplace => 1,
            Table::OrderLine | Table::ProductionOrder => 2,
            Table::ProductionOrderLine => 3,
        }
    }

    pub fn foreign_keys(self) -> &'static [ForeignKey] {
        match self {
            Table::Customer | Table::Item | Table::Workplace => &[],
            Table::Order => &[ForeignKey {
                columns: &[1],
                target: Table::Customer,
            }],
            Table::OrderLine => &[
                ForeignKey {
                    columns: &[0],
                    target: Table::Order,
                },
                ForeignKey {
                    columns: &[2],
                    target: Table::Item,
                },
            ],
            Table::ProductionOrder => &[ForeignKey {
                columns: &[0, 1],
                target: Table::OrderLine,
            }],
            Table::ProductionOrderLine => &[
                ForeignKey {
                    columns: &[0, 1],
                    target: Table::ProductionOrder,
                },
                ForeignKey {
                    columns: &[3],
                    target: Table::Workplace,
                },
            ],
        }
    }

    pub fn header(self) -> String {
        self.columns()
            .iter()
            .map(|c| c.name)
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn file_name(self) -> String {
        format!("{}.csv", self.name())
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Table {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Table::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| s.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn import_order_respects_references() {
        for (i, t) in Table::ALL.iter().enumerate() {
            for fk in t.foreign_keys() {
                let pos = Table::ALL.iter().position(|x| *x == fk.target).unwrap();
                assert!(pos < i, "{t} references later table {}", fk.target);
                assert_eq!(fk.columns.len(), fk.target.key_len());
            }
        }
    }

    #[test]
    fn spec_headers() {
        assert_eq!(
            Table::Workplace.header(),
            "wp_id,wp_name,wp_downtime_start,wp_downtime_end"
        );
        assert_eq!(
            Table::ProductionOrderLine.header(),
            "pol_o_id,pol_ol_number,pol_number,pol_workplace_id,pol_start_ts,pol_end_ts"
        );
    }

    #[test]
    fn parse_names() {
        assert_eq!("order_line".parse::<Table>(), Ok(Table::OrderLine));
        assert!("STOCK".parse::<Table>().is_err());
    }
}
